//! Toy training, evaluation, and the ablation and robustness tables.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::effioptim::Optimizer;
use crate::error::{Error, Result};
use crate::extract::{augmented_rows, partition_image, Image};
use crate::nn::{mix_seed, seeded, SeededRng};
use crate::tensor::Parameters;

use super::config::{CorruptionKind, ExperimentConfig, Task};
use super::data::{
    gen_synthetic_image, gen_synthetic_scene, label_voxels, laser_noise, pixel_noise, stack_labeled, LabeledVoxels,
    SceneParams, SyntheticScene, NUM_CLASSES,
};
use super::model::{predict, softmax_cross_entropy, ImageClsModel, VoxelSegModel};

const STREAM_TRAIN: u64 = 1;
const STREAM_EVAL: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_SHUFFLE: u64 = 4;
const STREAM_DROPOUT: u64 = 5;
const STREAM_CORRUPT: u64 = 6;
const WARMUP_STEPS: usize = 10;

/// One CSV row per epoch. Columns, in order: `epoch, steps, train_loss,
/// eval_miou, eval_accuracy, step_ms, state_bytes, param_bytes,
/// dropped_points`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub steps: usize,
    pub train_loss: f64,
    pub eval_miou: f64,
    pub eval_accuracy: f64,
    /// Median wall-clock per training step, after warmup.
    pub step_ms: f64,
    pub state_bytes: usize,
    pub param_bytes: usize,
    /// Points removed by per-voxel sampling over the training set.
    pub dropped_points: usize,
}

pub const METRICS_HEADER: [&str; 9] = [
    "epoch",
    "steps",
    "train_loss",
    "eval_miou",
    "eval_accuracy",
    "step_ms",
    "state_bytes",
    "param_bytes",
    "dropped_points",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics {
    pub rows: Vec<EpochMetrics>,
}

impl Metrics {
    pub fn last(&self) -> Option<&EpochMetrics> {
        self.rows.last()
    }

    /// Equality ignoring wall-clock columns.
    pub fn same_results(&self, other: &Metrics) -> bool {
        let strip = |m: &Metrics| -> Vec<EpochMetrics> {
            m.rows.iter().map(|r| EpochMetrics { step_ms: 0.0, ..r.clone() }).collect()
        };
        strip(self) == strip(other)
    }

    pub fn to_csv(&self) -> Result<String> {
        to_csv(&self.rows)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }
}

/// Serializes rows with a header taken from the field names.
pub fn to_csv<S: Serialize>(rows: &[S]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

/// Class confusion counts, `[truth][prediction]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion(pub [[usize; NUM_CLASSES]; NUM_CLASSES]);

impl Confusion {
    pub fn add(&mut self, truth: &[u8], pred: &[u8]) {
        for (&t, &p) in truth.iter().zip(pred) {
            self.0[t as usize][p as usize] += 1;
        }
    }

    /// IoU per class; `None` for classes absent from truth and predictions.
    pub fn class_iou(&self) -> [Option<f64>; NUM_CLASSES] {
        std::array::from_fn(|k| {
            let tp = self.0[k][k];
            let fp: usize = (0..NUM_CLASSES).map(|t| self.0[t][k]).sum::<usize>() - tp;
            let fne: usize = self.0[k].iter().sum::<usize>() - tp;
            (tp + fp + fne > 0).then(|| tp as f64 / (tp + fp + fne) as f64)
        })
    }

    /// Mean IoU over classes that occur in the truth or the predictions.
    pub fn mean_iou(&self) -> f64 {
        let present: Vec<f64> = self.class_iou().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        let total: usize = self.0.iter().flatten().sum();
        let hit: usize = (0..NUM_CLASSES).map(|k| self.0[k][k]).sum();
        if total == 0 {
            0.0
        } else {
            hit as f64 / total as f64
        }
    }
}

struct ImageSample {
    image: Image<f32>,
    patches: Vec<f32>,
    label: u8,
}

enum Dataset {
    Voxel { train: Vec<LabeledVoxels>, eval_scenes: Vec<SyntheticScene>, eval: Vec<LabeledVoxels> },
    Image { train: Vec<ImageSample>, eval: Vec<ImageSample> },
}

fn scene_params(cfg: &ExperimentConfig) -> SceneParams {
    let d = &cfg.data;
    SceneParams::for_grid(&cfg.extractor.voxel, d.objects, d.noise_floor, d.density)
}

fn image_sample(cfg: &ExperimentConfig, image: Image<f32>, label: u8) -> Result<ImageSample> {
    let patches = partition_image(&image, &cfg.extractor.patch_config())?.patches;
    Ok(ImageSample { image, patches, label })
}

fn build_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let d = &cfg.data;
    match cfg.task {
        Task::VoxelSegmentation => {
            let p = scene_params(cfg);
            let vc = &cfg.extractor.voxel;
            let scene = |stream: u64, i: usize| gen_synthetic_scene(mix_seed(mix_seed(cfg.seed, stream), i as u64), &p);
            let train =
                (0..d.train_scenes).map(|i| label_voxels(&scene(STREAM_TRAIN, i)?, vc)).collect::<Result<_>>()?;
            let eval_scenes: Vec<SyntheticScene> =
                (0..d.eval_scenes).map(|i| scene(STREAM_EVAL, i)).collect::<Result<_>>()?;
            let eval = eval_scenes.iter().map(|s| label_voxels(s, vc)).collect::<Result<_>>()?;
            Ok(Dataset::Voxel { train, eval_scenes, eval })
        }
        Task::ImageClassification => {
            let make = |stream: u64, n: usize| -> Result<Vec<ImageSample>> {
                (0..n)
                    .map(|i| {
                        let label = i % NUM_CLASSES;
                        let img =
                            gen_synthetic_image(mix_seed(mix_seed(cfg.seed, stream), i as u64), label, d.image_size)?;
                        image_sample(cfg, img, label as u8)
                    })
                    .collect()
            };
            Ok(Dataset::Image { train: make(STREAM_TRAIN, d.train_images)?, eval: make(STREAM_EVAL, d.eval_images)? })
        }
    }
}

/// A model trained by [`train`].
#[derive(Clone, Debug, PartialEq)]
pub enum TrainedModel {
    Voxel(VoxelSegModel<f32>),
    Image(ImageClsModel<f32>),
}

impl TrainedModel {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let mut rng = seeded(mix_seed(cfg.seed, STREAM_INIT));
        Ok(match cfg.task {
            Task::VoxelSegmentation => Self::Voxel(VoxelSegModel::new(cfg, &mut rng)?),
            Task::ImageClassification => Self::Image(ImageClsModel::new(cfg, &mut rng)?),
        })
    }

    pub fn param_count(&self) -> usize {
        match self {
            Self::Voxel(m) => m.param_count(),
            Self::Image(m) => m.param_count(),
        }
    }

    fn zero_grad(&mut self) {
        match self {
            Self::Voxel(m) => m.zero_grad(),
            Self::Image(m) => m.zero_grad(),
        }
    }

    fn step(&mut self, opt: &mut Optimizer) -> Result<()> {
        match self {
            Self::Voxel(m) => opt.step(&mut m.params_mut()),
            Self::Image(m) => opt.step(&mut m.params_mut()),
        }
    }
}

/// Trained model, its data, and the per-epoch metrics.
pub struct TrainOutcome {
    pub metrics: Metrics,
    pub model: TrainedModel,
    data: Dataset,
}

fn median(xs: &mut [f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

fn train_batch(model: &mut TrainedModel, data: &Dataset, idx: &[usize], dropout: &mut SeededRng) -> Result<f64> {
    match (model, data) {
        (TrainedModel::Voxel(m), Dataset::Voxel { train, .. }) => {
            let parts: Vec<&LabeledVoxels> = idx.iter().map(|&i| &train[i]).collect();
            let batch = stack_labeled(&parts)?;
            let rows = augmented_rows::<f32>(&batch.voxels);
            let (logits, cache) = m.forward(&batch.voxels, &rows, Some(dropout))?;
            let (loss, grad) = softmax_cross_entropy(&logits, &batch.labels, NUM_CLASSES)?;
            m.backward(&cache, &grad)?;
            Ok(loss)
        }
        (TrainedModel::Image(m), Dataset::Image { train, .. }) => {
            let patches: Vec<f32> = idx.iter().flat_map(|&i| train[i].patches.iter().copied()).collect();
            let labels: Vec<u8> = idx.iter().map(|&i| train[i].label).collect();
            let (logits, cache) = m.forward(&patches, idx.len(), Some(dropout))?;
            let (loss, grad) = softmax_cross_entropy(&logits, &labels, NUM_CLASSES)?;
            m.backward(&cache, &grad)?;
            Ok(loss)
        }
        _ => Err(Error::State("model and dataset belong to different tasks".into())),
    }
}

fn evaluate(
    model: &TrainedModel,
    data: &Dataset,
    kind: CorruptionKind,
    sigma: f64,
    seed: u64,
    cfg: &ExperimentConfig,
) -> Result<Confusion> {
    let mut conf = Confusion::default();
    let corrupt_seed = mix_seed(seed, STREAM_CORRUPT);
    match (model, data) {
        (TrainedModel::Voxel(m), Dataset::Voxel { eval_scenes, eval, .. }) => {
            for (i, (scene, clean)) in eval_scenes.iter().zip(eval).enumerate() {
                let noisy;
                let lv = if kind.laser() && sigma > 0.0 {
                    let cloud = laser_noise(&scene.cloud, sigma, mix_seed(corrupt_seed, i as u64))?;
                    let s = SyntheticScene { cloud, labels: scene.labels.clone() };
                    noisy = label_voxels(&s, &cfg.extractor.voxel)?;
                    &noisy
                } else {
                    clean
                };
                let rows = augmented_rows::<f32>(&lv.voxels);
                let (logits, _) = m.forward(&lv.voxels, &rows, None)?;
                conf.add(&lv.labels, &predict(&logits, NUM_CLASSES));
            }
        }
        (TrainedModel::Image(m), Dataset::Image { eval, .. }) => {
            let mut patches = Vec::new();
            for (i, s) in eval.iter().enumerate() {
                if kind.pixel() && sigma > 0.0 {
                    let img = pixel_noise(&s.image, sigma, mix_seed(corrupt_seed, i as u64))?;
                    patches.extend(image_sample(cfg, img, s.label)?.patches);
                } else {
                    patches.extend_from_slice(&s.patches);
                }
            }
            let (logits, _) = m.forward(&patches, eval.len(), None)?;
            let labels: Vec<u8> = eval.iter().map(|s| s.label).collect();
            conf.add(&labels, &predict(&logits, NUM_CLASSES));
        }
        _ => return Err(Error::State("model and dataset belong to different tasks".into())),
    }
    Ok(conf)
}

impl TrainOutcome {
    /// Confusion on the evaluation set under one corruption.
    pub fn confusion(&self, cfg: &ExperimentConfig, kind: CorruptionKind, sigma: f64) -> Result<Confusion> {
        evaluate(&self.model, &self.data, kind, sigma, cfg.seed, cfg)
    }
}

/// Trains the configured model on clean data and evaluates each epoch under
/// `cfg.corruption`. Deterministic in the config.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = build_dataset(cfg)?;
    let mut model = TrainedModel::new(cfg)?;
    let sizes: Vec<usize> = match &model {
        TrainedModel::Voxel(m) => m.params().iter().map(|p| p.len()).collect(),
        TrainedModel::Image(m) => m.params().iter().map(|p| p.len()).collect(),
    };
    let mut opt = Optimizer::new(cfg.optimizer, cfg.optim, &sizes)?;
    let (n_train, dropped) = match &data {
        Dataset::Voxel { train, .. } => (train.len(), train.iter().map(|lv| lv.voxels.stats.dropped).sum()),
        Dataset::Image { train, .. } => (train.len(), 0),
    };
    let mut shuffle = seeded(mix_seed(cfg.seed, STREAM_SHUFFLE));
    let mut dropout = seeded(mix_seed(cfg.seed, STREAM_DROPOUT));
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut metrics = Metrics::default();
    let mut steps = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        let mut times = Vec::new();
        let mut all_times = Vec::new();
        for idx in order.chunks(cfg.batch_size) {
            let t0 = Instant::now();
            model.zero_grad();
            let loss = train_batch(&mut model, &data, idx, &mut dropout)?;
            model.step(&mut opt)?;
            let ms = t0.elapsed().as_secs_f64() * 1e3;
            if steps >= WARMUP_STEPS {
                times.push(ms);
            }
            all_times.push(ms);
            steps += 1;
            loss_sum += loss;
            batches += 1;
        }
        let conf = evaluate(&model, &data, cfg.corruption.kind, cfg.corruption.sigma, cfg.seed, cfg)?;
        let train_loss = loss_sum / batches as f64;
        if !train_loss.is_finite() {
            return Err(Error::Numeric(format!("training loss became {train_loss} in epoch {epoch}")));
        }
        let step_ms = if times.is_empty() { median(&mut all_times) } else { median(&mut times) };
        metrics.rows.push(EpochMetrics {
            epoch,
            steps,
            train_loss,
            eval_miou: conf.mean_iou(),
            eval_accuracy: conf.accuracy(),
            step_ms,
            state_bytes: opt.state_bytes(),
            param_bytes: 4 * model.param_count(),
            dropped_points: dropped,
        });
    }
    Ok(TrainOutcome { metrics, model, data })
}

/// Trains the configured model and returns its per-epoch metrics.
pub fn train_toy(cfg: &ExperimentConfig) -> Result<Metrics> {
    train(cfg).map(|o| o.metrics)
}

/// One row of the SDS x GSA ablation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub sds: bool,
    pub gsa: bool,
    pub params: usize,
    pub final_loss: f64,
    pub eval_miou: f64,
    pub eval_accuracy: f64,
    pub step_ms: f64,
    pub state_bytes: usize,
}

/// Trains all four SDS/GSA combinations with the same seed.
pub fn ablate(cfg: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(4);
    for (sds, gsa) in [(false, false), (true, false), (false, true), (true, true)] {
        let variant = ExperimentConfig { sds, gsa, ..cfg.clone() };
        let out = train(&variant)?;
        let last = out.metrics.last().ok_or_else(|| Error::State("no epochs ran".into()))?;
        rows.push(AblationRow {
            sds,
            gsa,
            params: out.model.param_count(),
            final_loss: last.train_loss,
            eval_miou: last.eval_miou,
            eval_accuracy: last.eval_accuracy,
            step_ms: last.step_ms,
            state_bytes: last.state_bytes,
        });
    }
    Ok(rows)
}

/// One evaluation condition of the robustness table. Deltas are relative to
/// the clean row, in metric units.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RobustRow {
    pub condition: String,
    pub sigma: f64,
    pub eval_miou: f64,
    pub eval_accuracy: f64,
    pub delta_miou: f64,
    pub delta_accuracy: f64,
}

/// Evaluates one trained model on clean, laser-noise, pixel-noise and
/// combined corruptions of the evaluation set. Laser noise only affects
/// point clouds and pixel noise only images, so one of the two single
/// corruption rows always matches the clean row.
pub fn robustness_suite(cfg: &ExperimentConfig, sigma: f64) -> Result<Vec<RobustRow>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    let out = train(cfg)?;
    robustness_rows(&out, cfg, sigma)
}

/// The robustness rows for an already trained model.
pub fn robustness_rows(out: &TrainOutcome, cfg: &ExperimentConfig, sigma: f64) -> Result<Vec<RobustRow>> {
    let kinds = [CorruptionKind::None, CorruptionKind::LaserNoise, CorruptionKind::PixelNoise, CorruptionKind::Both];
    let mut rows: Vec<RobustRow> = Vec::with_capacity(4);
    for kind in kinds {
        let s = if kind == CorruptionKind::None { 0.0 } else { sigma };
        let conf = evaluate(&out.model, &out.data, kind, s, cfg.seed, cfg)?;
        let (miou, acc) = (conf.mean_iou(), conf.accuracy());
        let (m0, a0) = rows.first().map_or((miou, acc), |r| (r.eval_miou, r.eval_accuracy));
        rows.push(RobustRow {
            condition: kind.name().to_string(),
            sigma: s,
            eval_miou: miou,
            eval_accuracy: acc,
            delta_miou: miou - m0,
            delta_accuracy: acc - a0,
        });
    }
    Ok(rows)
}
