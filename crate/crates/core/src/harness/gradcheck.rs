//! Central-difference gradient checks for every differentiable op.
//!
//! Each probe builds a small random instance in `f64`, takes the scalar
//! `L = <w, f(x)>` with random `w`, and compares the analytic gradient of `L`
//! with respect to every input element and every parameter element against
//! `(L(x + eps) - L(x - eps)) / (2 eps)`.

use rand::Rng;
use serde::Serialize;

use crate::error::{config_err, Result};
use crate::extract::{
    encode_patches, encode_voxel_rows, partition_image, voxel_encoder_backward, voxelize, Image, ImagePatchConfig,
    MlpEncoder, PointCloud, Reduce, VoxelBatch, VoxelConfig,
};
use crate::gsa::{Gsa, GsaConfig};
use crate::nn::{mix_seed, seeded, Activation, SeededRng};
use crate::sparse_conv::{
    build_index_map_for, ConvGeometry, IndexMap, InverseSparseConvLayer, SdsBlock, SdsConfig, SparseConvLayer,
};
use crate::tensor::{Coord, Extent, Parameters, SparseVoxelTensor};

use super::config::{ExperimentConfig, ExtractorConfig, GsaLayers, SdsLayers};
use super::data::NUM_CLASSES;
use super::model::{softmax_cross_entropy, ImageClsModel, VoxelSegModel};

pub const TOLERANCE: f64 = 1e-4;
pub const EPS: f64 = 1e-5;
/// Denominator floor: gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

pub const OPS: [&str; 9] = [
    "patch_mlp",
    "voxel_mlp",
    "submanifold_conv",
    "regular_conv",
    "inverse_conv",
    "sds",
    "gsa",
    "seg_head",
    "cls_head",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradReport {
    pub op: String,
    pub instances: usize,
    pub elements: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Worst relative error over all input and parameter elements, and the
/// number of elements checked.
pub fn check_module<M, F, B>(
    module: &mut M,
    input: &[f64],
    forward: F,
    backward: B,
    rng: &mut SeededRng,
) -> Result<(f64, usize)>
where
    M: Parameters<f64>,
    F: Fn(&M, &[f64]) -> Result<Vec<f64>>,
    B: Fn(&mut M, &[f64], &[f64]) -> Result<Vec<f64>>,
{
    let y = forward(module, input)?;
    let w: Vec<f64> = (0..y.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = |m: &M, x: &[f64]| -> Result<f64> { Ok(forward(m, x)?.iter().zip(&w).map(|(a, b)| a * b).sum()) };

    module.zero_grad();
    let g_in = backward(module, input, &w)?;
    let g_params: Vec<Vec<f64>> =
        module.params().iter().map(|p| p.grad().map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec)).collect();

    let mut worst = 0.0f64;
    let mut count = 0;
    let mut x = input.to_vec();
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + EPS;
        let hi = loss(module, &x)?;
        x[i] = orig - EPS;
        let lo = loss(module, &x)?;
        x[i] = orig;
        worst = worst.max(rel_error(g_in[i], (hi - lo) / (2.0 * EPS)));
        count += 1;
    }
    for (j, g) in g_params.iter().enumerate() {
        #[allow(clippy::needless_range_loop)]
        for k in 0..g.len() {
            let orig = module.params()[j].data[k];
            module.params_mut()[j].data[k] = orig + EPS;
            let hi = loss(module, input)?;
            module.params_mut()[j].data[k] = orig - EPS;
            let lo = loss(module, input)?;
            module.params_mut()[j].data[k] = orig;
            worst = worst.max(rel_error(g[k], (hi - lo) / (2.0 * EPS)));
            count += 1;
        }
    }
    Ok((worst, count))
}

/// Gives every bias a random non-zero value so no unit sits exactly on a
/// ReLU kink when its input is zero.
fn randomize_biases<M: Parameters<f64>>(m: &mut M, rng: &mut SeededRng) {
    for p in m.params_mut() {
        if p.shape.len() == 1 {
            p.data.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
}

fn random_sparse(
    rng: &mut SeededRng,
    extent: Extent,
    batch: usize,
    channels: usize,
    density: f64,
) -> Result<SparseVoxelTensor<f64>> {
    let mut coords = Vec::new();
    for b in 0..batch {
        for z in 0..extent.d {
            for y in 0..extent.h {
                for x in 0..extent.w {
                    if rng.random::<f64>() < density {
                        coords.push(Coord::new(b as u32, z as u32, y as u32, x as u32));
                    }
                }
            }
        }
    }
    if coords.is_empty() {
        coords.push(Coord::new(0, 0, 0, 0));
    }
    let features = (0..coords.len() * channels).map(|_| rng.random_range(-1.0..1.0)).collect();
    SparseVoxelTensor::new(extent, batch, channels, coords, features)
}

fn random_cloud(rng: &mut SeededRng, n: usize, hi: f32) -> Result<PointCloud> {
    PointCloud::new((0..n).map(|_| [0; 3].map(|_: i32| rng.random_range(0.0..hi))).collect(), None)
}

fn probe_patch_mlp(rng: &mut SeededRng) -> Result<(f64, usize)> {
    let img = Image::new(4, 6, (0..72).map(|_| rng.random_range(0.0..1.0)).collect())?;
    let pc = ImagePatchConfig { patch_h: 2, patch_w: 3, out_dim: 3 };
    let patches = partition_image(&img, &pc)?;
    let mut mlp = MlpEncoder::<f64>::new(&[pc.row_len(), 5, 3], Activation::Relu, 0.0, rng)?;
    randomize_biases(&mut mlp, rng);
    let input = patches.patches.clone();
    let fwd = |m: &MlpEncoder<f64>, x: &[f64]| {
        let p = crate::extract::PatchSet { patches: x.to_vec(), ..patches.clone() };
        Ok(encode_patches(&p, m, None)?.0.into_data())
    };
    let bwd = |m: &mut MlpEncoder<f64>, x: &[f64], g: &[f64]| {
        let (_, cache) = m.forward(x, patches.count(), None)?;
        Ok(m.backward(&cache, g))
    };
    check_module(&mut mlp, &input, fwd, bwd, rng)
}

fn small_voxels(rng: &mut SeededRng, points: usize, max_points: usize) -> Result<VoxelBatch> {
    let cfg =
        VoxelConfig { range_min: [0.0; 3], range_max: [0.8; 3], voxel_size: [0.2; 3], max_points, seed: rng.random() };
    voxelize(&random_cloud(rng, points, 0.8)?, &cfg)
}

fn probe_voxel_mlp(rng: &mut SeededRng, reduce: Reduce) -> Result<(f64, usize)> {
    let vb = small_voxels(rng, 40, 3)?;
    let mut mlp = MlpEncoder::<f64>::new(&[6, 5, 4], Activation::Relu, 0.0, rng)?;
    randomize_biases(&mut mlp, rng);
    let input = crate::extract::augmented_rows::<f64>(&vb);
    let fwd = |m: &MlpEncoder<f64>, x: &[f64]| Ok(encode_voxel_rows(&vb, x, m, reduce, None)?.0.into_features());
    let bwd = |m: &mut MlpEncoder<f64>, x: &[f64], g: &[f64]| {
        let (_, cache) = encode_voxel_rows(&vb, x, m, reduce, None)?;
        Ok(voxel_encoder_backward(m, &cache, g))
    };
    check_module(&mut mlp, &input, fwd, bwd, rng)
}

fn probe_conv(rng: &mut SeededRng, geometry: ConvGeometry) -> Result<(f64, usize)> {
    let x = random_sparse(rng, Extent::new(4, 5, 6), 2, 3, 0.25)?;
    let mut layer = SparseConvLayer::<f64>::new(3, 2, geometry, rng)?;
    randomize_biases(&mut layer, rng);
    let map = build_index_map_for(&x, &geometry)?;
    let fwd = |l: &SparseConvLayer<f64>, f: &[f64]| {
        Ok(l.forward_with_map(&x.with_features(3, f.to_vec())?, &map)?.into_features())
    };
    let bwd =
        |l: &mut SparseConvLayer<f64>, f: &[f64], g: &[f64]| l.backward(&x.with_features(3, f.to_vec())?, &map, g);
    check_module(&mut layer, x.features(), fwd, bwd, rng)
}

fn probe_inverse(rng: &mut SeededRng) -> Result<(f64, usize)> {
    let x = random_sparse(rng, Extent::new(5, 5, 6), 1, 2, 0.3)?;
    let map: IndexMap = build_index_map_for(&x, &ConvGeometry::regular(3, 2, 1))?;
    let coarse = map.output_coords().to_vec();
    let features = (0..coarse.len() * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let h = SparseVoxelTensor::new(map.output_extent, 1, 3, coarse, features)?;
    let mut inv = InverseSparseConvLayer::<f64>::new(3, 2, [3; 3], rng)?;
    randomize_biases(&mut inv, rng);
    let fwd = |l: &InverseSparseConvLayer<f64>, f: &[f64]| {
        Ok(l.forward_with_map(&h.with_features(3, f.to_vec())?, &map)?.into_features())
    };
    let bwd = |l: &mut InverseSparseConvLayer<f64>, f: &[f64], g: &[f64]| {
        l.backward(&h.with_features(3, f.to_vec())?, &map, g)
    };
    check_module(&mut inv, h.features(), fwd, bwd, rng)
}

fn probe_sds(rng: &mut SeededRng) -> Result<(f64, usize)> {
    let x = random_sparse(rng, Extent::new(4, 5, 5), 1, 2, 0.2)?;
    let cfg = SdsConfig {
        in_channels: 2,
        mid_channels: 2,
        restore_channels: 2,
        post_channels: 2,
        out_channels: 2,
        kernel: 3,
        activation: Activation::Relu,
    };
    let mut block = SdsBlock::<f64>::new(&cfg, rng)?;
    randomize_biases(&mut block, rng);
    let fwd = |b: &SdsBlock<f64>, f: &[f64]| Ok(b.forward(&x.with_features(2, f.to_vec())?)?.0.into_features());
    let bwd = |b: &mut SdsBlock<f64>, f: &[f64], g: &[f64]| {
        let (_, cache) = b.forward(&x.with_features(2, f.to_vec())?)?;
        b.backward(&cache, g)
    };
    check_module(&mut block, x.features(), fwd, bwd, rng)
}

fn probe_gsa(rng: &mut SeededRng) -> Result<(f64, usize)> {
    let cfg = GsaConfig {
        grid: [2, 5, 4],
        downsample: [1, 1, 1],
        channels: 2,
        scale_widths: [2, 3],
        activation: Activation::Relu,
    };
    let s = random_sparse(rng, cfg.extent(), 2, 2, 0.35)?;
    let mut gsa = Gsa::<f64>::new(cfg, rng)?;
    randomize_biases(&mut gsa, rng);
    let fwd = |m: &Gsa<f64>, f: &[f64]| Ok(m.forward(&s.with_features(2, f.to_vec())?)?.0.into_features());
    let bwd = |m: &mut Gsa<f64>, f: &[f64], g: &[f64]| {
        let (_, cache) = m.forward(&s.with_features(2, f.to_vec())?)?;
        m.backward(&cache, g)
    };
    check_module(&mut gsa, s.features(), fwd, bwd, rng)
}

/// Small end-to-end config: every stage present, tiny widths.
fn tiny_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        extractor: ExtractorConfig {
            voxel: VoxelConfig { range_min: [0.0; 3], range_max: [0.8; 3], voxel_size: [0.2; 3], max_points: 3, seed },
            hidden: vec![4],
            features: 3,
            patch: [2, 2],
            ..ExtractorConfig::default()
        },
        sds_layers: SdsLayers { mid_channels: 2, restore_channels: 2, post_channels: 2, out_channels: 2, kernel: 3 },
        gsa_layers: GsaLayers { scale_widths: [2, 2] },
        data: super::config::DataConfig { image_size: 4, ..Default::default() },
        ..ExperimentConfig::default()
    }
}

fn probe_seg_head(rng: &mut SeededRng) -> Result<(f64, usize)> {
    let cfg = tiny_config(rng.random());
    let vb = small_voxels(rng, 30, 3)?;
    let labels: Vec<u8> = (0..vb.len()).map(|_| rng.random_range(0..NUM_CLASSES as u8)).collect();
    let mut model = VoxelSegModel::<f64>::new(&cfg, rng)?;
    randomize_biases(&mut model, rng);
    let input = crate::extract::augmented_rows::<f64>(&vb);
    let fwd = |m: &VoxelSegModel<f64>, x: &[f64]| {
        let (logits, _) = m.forward(&vb, x, None)?;
        Ok(vec![softmax_cross_entropy(&logits, &labels, NUM_CLASSES)?.0])
    };
    let bwd = |m: &mut VoxelSegModel<f64>, x: &[f64], g: &[f64]| {
        let (logits, cache) = m.forward(&vb, x, None)?;
        let (_, gl) = softmax_cross_entropy(&logits, &labels, NUM_CLASSES)?;
        m.backward(&cache, &gl.iter().map(|v| v * g[0]).collect::<Vec<_>>())
    };
    check_module(&mut model, &input, fwd, bwd, rng)
}

fn probe_cls_head(rng: &mut SeededRng) -> Result<(f64, usize)> {
    let cfg = tiny_config(rng.random());
    let batch = 2;
    let mut model = ImageClsModel::<f64>::new(&cfg, rng)?;
    randomize_biases(&mut model, rng);
    let n = batch * model.grid.0 * model.grid.1 * model.encoder.input_dim();
    let input: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let labels: Vec<u8> = (0..batch).map(|_| rng.random_range(0..NUM_CLASSES as u8)).collect();
    let fwd = |m: &ImageClsModel<f64>, x: &[f64]| {
        let (logits, _) = m.forward(x, batch, None)?;
        Ok(vec![softmax_cross_entropy(&logits, &labels, NUM_CLASSES)?.0])
    };
    let bwd = |m: &mut ImageClsModel<f64>, x: &[f64], g: &[f64]| {
        let (logits, cache) = m.forward(x, batch, None)?;
        let (_, gl) = softmax_cross_entropy(&logits, &labels, NUM_CLASSES)?;
        m.backward(&cache, &gl.iter().map(|v| v * g[0]).collect::<Vec<_>>())
    };
    check_module(&mut model, &input, fwd, bwd, rng)
}

fn run_probe(op: &str, rng: &mut SeededRng, instance: usize) -> Result<(f64, usize)> {
    match op {
        "patch_mlp" => probe_patch_mlp(rng),
        "voxel_mlp" => probe_voxel_mlp(rng, if instance.is_multiple_of(2) { Reduce::Max } else { Reduce::Mean }),
        "submanifold_conv" => probe_conv(rng, ConvGeometry::submanifold(3)),
        "regular_conv" => {
            let g = match instance % 3 {
                0 => ConvGeometry::regular(3, 2, 1),
                1 => ConvGeometry::regular(2, 2, 0),
                _ => ConvGeometry::regular(3, 1, 1),
            };
            probe_conv(rng, g)
        }
        "inverse_conv" => probe_inverse(rng),
        "sds" => probe_sds(rng),
        "gsa" => probe_gsa(rng),
        "seg_head" => probe_seg_head(rng),
        "cls_head" => probe_cls_head(rng),
        other => Err(config_err!("unknown op {other:?}; expected one of {OPS:?}")),
    }
}

/// Runs `instances` random probes of one op (or all ops when `op` is `None`).
pub fn gradcheck(op: Option<&str>, instances: usize, seed: u64) -> Result<Vec<GradReport>> {
    let ops: Vec<&str> = match op {
        Some(name) if OPS.contains(&name) => vec![name],
        Some(name) => return Err(config_err!("unknown op {name:?}; expected one of {OPS:?}")),
        None => OPS.to_vec(),
    };
    ops.into_iter()
        .enumerate()
        .map(|(k, name)| {
            let mut worst = 0.0f64;
            let mut elements = 0;
            for i in 0..instances {
                let mut rng = seeded(mix_seed(mix_seed(seed, k as u64), i as u64));
                let (err, n) = run_probe(name, &mut rng, i)?;
                worst = worst.max(err);
                elements += n;
            }
            Ok(GradReport {
                op: name.to_string(),
                instances,
                elements,
                max_rel_error: worst,
                passed: worst < TOLERANCE,
            })
        })
        .collect()
}
