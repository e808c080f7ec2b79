use proptest::prelude::*;
use rand::Rng;

use effiperc_core::effioptim::OptimizerKind;
use effiperc_core::extract::{Image, PointCloud};
use effiperc_core::harness::config::{Corruption, CorruptionKind, DataConfig, Task};
use effiperc_core::harness::data::{gen_synthetic_scene, laser_noise, pixel_noise, SceneParams, GROUND, NUM_CLASSES};
use effiperc_core::harness::train::{robustness_rows, train};
use effiperc_core::harness::ExperimentConfig;
use effiperc_core::nn::seeded;
use effiperc_core::Error;

fn quick() -> ExperimentConfig {
    ExperimentConfig::from_toml("epochs = 3\n[data]\ntrain_scenes = 4\neval_scenes = 2\n").unwrap()
}

fn sample_std(xs: &[f64]) -> f64 {
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn params(objects: usize) -> SceneParams {
    SceneParams {
        x_range: [0.0, 12.8],
        y_range: [0.0, 12.8],
        ground_z: -1.5,
        objects,
        noise_floor: 0.01,
        density: 60.0,
    }
}

#[test]
fn training_is_deterministic_in_the_config() {
    let cfg = quick();
    let a = train(&cfg).unwrap();
    let b = train(&cfg).unwrap();
    assert!(a.metrics.same_results(&b.metrics));
    let mut other = cfg.clone();
    other.seed += 1;
    assert!(!train(&other).unwrap().metrics.same_results(&a.metrics));
}

#[test]
fn eight_bit_state_is_under_a_third_of_fp32() {
    let mut cfg = quick();
    cfg.epochs = 1;
    let q = train(&cfg).unwrap();
    cfg.optimizer = OptimizerKind::Fp32;
    let f = train(&cfg).unwrap();
    let (qb, fb) = (q.metrics.last().unwrap().state_bytes, f.metrics.last().unwrap().state_bytes);
    assert!((qb as f64) < 0.30 * fb as f64, "8-bit {qb} B vs fp32 {fb} B");
    assert_eq!(q.metrics.last().unwrap().param_bytes, f.metrics.last().unwrap().param_bytes);
}

#[test]
fn invalid_configs_fail_before_training() {
    let mut cfg = quick();
    cfg.batch_size = 0;
    assert!(matches!(train(&cfg), Err(Error::Config(_))));
    let mut cfg = quick();
    cfg.optim.lr = -1.0;
    assert!(matches!(train(&cfg), Err(Error::Config(_))));
    assert!(matches!(ExperimentConfig::from_toml("unknown_key = 1"), Err(Error::Config(_))));
}

#[test]
fn config_survives_a_toml_round_trip() {
    let cfg = ExperimentConfig {
        task: Task::ImageClassification,
        corruption: Corruption { kind: CorruptionKind::Both, sigma: 0.1 },
        ..ExperimentConfig::default()
    };
    assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
}

#[test]
fn corruption_in_the_config_changes_only_evaluation() {
    let clean = quick();
    let mut noisy = quick();
    noisy.corruption.kind = CorruptionKind::LaserNoise;
    noisy.corruption.sigma = 0.2;
    let a = train(&clean).unwrap();
    let b = train(&noisy).unwrap();
    for (x, y) in a.metrics.rows.iter().zip(&b.metrics.rows) {
        assert_eq!(x.train_loss, y.train_loss);
    }
    let last = b.metrics.last().unwrap();
    let direct = b.confusion(&noisy, CorruptionKind::LaserNoise, 0.2).unwrap();
    assert_eq!(last.eval_miou, direct.mean_iou());
    // pixel noise has no effect on point clouds
    let pix = a.confusion(&clean, CorruptionKind::PixelNoise, 0.2).unwrap();
    assert_eq!(pix, a.confusion(&clean, CorruptionKind::None, 0.0).unwrap());
}

#[test]
fn zero_sigma_rows_match_the_clean_row() {
    let cfg = quick();
    let out = train(&cfg).unwrap();
    let rows = robustness_rows(&out, &cfg, 0.0).unwrap();
    for r in &rows {
        assert_eq!(r.eval_miou, rows[0].eval_miou, "{}", r.condition);
        assert_eq!(r.delta_miou, 0.0);
    }
}

#[test]
fn image_task_trains_on_the_quick_budget() {
    let cfg = ExperimentConfig {
        task: Task::ImageClassification,
        epochs: 2,
        batch_size: 8,
        data: DataConfig { train_images: 16, eval_images: 8, ..DataConfig::default() },
        ..ExperimentConfig::default()
    };
    let out = train(&cfg).unwrap();
    assert_eq!(out.metrics.rows.len(), 2);
    assert!(out.metrics.rows.iter().all(|r| r.train_loss.is_finite() && (0.0..=1.0).contains(&r.eval_accuracy)));
}

#[test]
fn laser_noise_has_the_requested_spread() {
    let mut rng = seeded(3);
    let pts: Vec<[f32; 3]> =
        (0..40_000).map(|_| [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), 0.5]).collect();
    let pc = PointCloud::new(pts, None).unwrap();
    let sigma = 0.05;
    let noisy = laser_noise(&pc, sigma, 11).unwrap();
    let diffs: Vec<f64> =
        pc.points.iter().zip(&noisy.points).flat_map(|(a, b)| (0..3).map(move |k| b[k] as f64 - a[k] as f64)).collect();
    assert!(diffs.len() >= 100_000);
    let s = sample_std(&diffs);
    assert!((s - sigma).abs() <= 0.1 * sigma, "std {s}");
    assert_eq!(laser_noise(&pc, sigma, 11).unwrap(), noisy);
}

#[test]
fn pixel_noise_has_the_requested_spread() {
    let sigma = 0.05;
    let img = Image::new(200, 200, vec![0.5f32; 200 * 200 * 3]).unwrap();
    let noisy = pixel_noise(&img, sigma, 5).unwrap();
    let diffs: Vec<f64> = noisy.data.iter().map(|&v| v as f64 - 0.5).collect();
    let s = sample_std(&diffs);
    assert!((s - sigma).abs() <= 0.1 * sigma, "std {s}");
    let saturated = pixel_noise(&img, 2.0, 5).unwrap();
    assert!(saturated.data.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(saturated.data.contains(&0.0) && saturated.data.contains(&1.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scenes_are_labeled_and_reproducible(seed: u64, objects in 0usize..8) {
        let p = params(objects);
        let s = gen_synthetic_scene(seed, &p).unwrap();
        prop_assert_eq!(s.labels.len(), s.cloud.len());
        prop_assert!(s.labels.iter().all(|&l| (l as usize) < NUM_CLASSES));
        prop_assert!(s.labels.contains(&GROUND));
        if objects == 0 {
            prop_assert!(s.labels.iter().all(|&l| l == GROUND));
        }
        prop_assert_eq!(gen_synthetic_scene(seed, &p).unwrap(), s);
    }

    #[test]
    fn zero_sigma_leaves_inputs_untouched(seed: u64) {
        let mut rng = seeded(seed);
        let pc = PointCloud::new((0..50).map(|_| [rng.random(), rng.random(), rng.random()]).collect(), None).unwrap();
        prop_assert_eq!(laser_noise(&pc, 0.0, seed).unwrap(), pc);
        let img = Image::new(4, 5, (0..60).map(|_| rng.random()).collect()).unwrap();
        prop_assert_eq!(pixel_noise(&img, 0.0, seed).unwrap(), img);
    }
}

#[test]
fn five_objects_give_at_least_two_classes() {
    for seed in 0..20 {
        let s = gen_synthetic_scene(seed, &params(5)).unwrap();
        let mut classes = s.labels.clone();
        classes.sort_unstable();
        classes.dedup();
        assert!(classes.len() >= 2, "seed {seed}: {classes:?}");
    }
}
