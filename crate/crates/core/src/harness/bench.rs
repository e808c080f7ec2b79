//! Sparse convolution against the dense baseline on a mostly empty grid.

use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::nn::seeded;
use crate::sparse_conv::{dense_conv3d, sparse_conv_forward, ConvGeometry, SparseConvLayer};
use crate::tensor::{Coord, Extent, SparseVoxelTensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchConfig {
    pub extent: usize,
    pub density: f64,
    pub channels: usize,
    pub sparse_reps: usize,
    pub dense_reps: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { extent: 64, density: 0.01, channels: 8, sparse_reps: 5, dense_reps: 3, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub layer: String,
    pub extent: usize,
    pub active: usize,
    pub channels: usize,
    pub sparse_ms: f64,
    pub dense_ms: f64,
    pub speedup: f64,
}

fn median_ms(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut t = Vec::with_capacity(reps);
    for _ in 0..reps.max(1) {
        let t0 = Instant::now();
        f()?;
        t.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    t.sort_by(f64::total_cmp);
    Ok(t[t.len() / 2])
}

/// Times a submanifold and a stride-2 regular layer. The sparse timing
/// covers building the rulebook; the dense timing covers densifying the
/// input and convolving the full grid.
pub fn bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    let mut rng = seeded(cfg.seed);
    let e = Extent::new(cfg.extent, cfg.extent, cfg.extent);
    let vol = e.volume();
    let active = ((vol as f64 * cfg.density).round() as usize).clamp(1, vol);
    let coords: Vec<Coord> = sample(&mut rng, vol, active)
        .into_iter()
        .map(|i| Coord::new(0, (i / (e.h * e.w)) as u32, (i / e.w % e.h) as u32, (i % e.w) as u32))
        .collect();
    let c = cfg.channels;
    let features = (0..active * c).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let x = SparseVoxelTensor::new(e, 1, c, coords, features)?;

    let mut rows = Vec::new();
    for (name, geometry) in
        [("submanifold", ConvGeometry::submanifold(3)), ("regular-s2", ConvGeometry::regular(3, 2, 1))]
    {
        let layer = SparseConvLayer::<f32>::new(c, c, geometry, &mut rng)?;
        let sparse_ms = median_ms(cfg.sparse_reps, || sparse_conv_forward(&x, &layer).map(drop))?;
        let dense_ms = median_ms(cfg.dense_reps, || {
            let d = x.densify();
            dense_conv3d(
                &d,
                &layer.weight.data,
                &layer.bias.data,
                c,
                geometry.kernel,
                geometry.stride,
                geometry.padding,
            )
            .map(drop)
        })?;
        rows.push(BenchRow {
            layer: name.to_string(),
            extent: cfg.extent,
            active,
            channels: c,
            sparse_ms,
            dense_ms,
            speedup: dense_ms / sparse_ms.max(1e-9),
        });
    }
    Ok(rows)
}
