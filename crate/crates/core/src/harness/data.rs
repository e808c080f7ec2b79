//! Synthetic scenes and images, plus the evaluation-time corruptions.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{config_err, Result};
use crate::extract::{voxelize, Image, PointCloud, VoxelBatch, VoxelConfig};
use crate::nn::{mix_seed, seeded, SeededRng};

pub const NUM_CLASSES: usize = 4;
pub const GROUND: u8 = 0;
pub const BOX: u8 = 1;
pub const SPHERE: u8 = 2;
pub const POLE: u8 = 3;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["ground", "box", "sphere", "pole"];

/// Generator knobs. The ground plane sits at `ground_z`, objects stand on
/// `z = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneParams {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub ground_z: f64,
    pub objects: usize,
    pub noise_floor: f64,
    pub density: f64,
}

impl SceneParams {
    /// Fits the scene to the voxel grid's horizontal range and puts the
    /// ground in the middle of the lowest voxel layer.
    pub fn for_grid(v: &VoxelConfig, objects: usize, noise_floor: f64, density: f64) -> Self {
        Self {
            x_range: [v.range_min[0], v.range_max[0]],
            y_range: [v.range_min[1], v.range_max[1]],
            ground_z: v.range_min[2] + 0.5 * v.voxel_size[2],
            objects,
            noise_floor,
            density,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub cloud: PointCloud,
    /// One class per point.
    pub labels: Vec<u8>,
}

struct Builder<'a> {
    rng: &'a mut SeededRng,
    noise: Option<Normal<f64>>,
    points: Vec<[f32; 3]>,
    labels: Vec<u8>,
}

impl Builder<'_> {
    fn push(&mut self, p: [f64; 3], label: u8) {
        let q = match self.noise {
            Some(n) => std::array::from_fn(|a| p[a] + n.sample(self.rng)),
            None => p,
        };
        self.points.push(q.map(|v| v as f32));
        self.labels.push(label);
    }

    fn count(&mut self, area: f64, density: f64) -> usize {
        // expected count with a random fractional remainder keeps density unbiased
        let n = area * density;
        n.floor() as usize + usize::from(self.rng.random::<f64>() < n.fract())
    }

    /// Axis-aligned rectangle spanned from `origin` along `u` and `v`.
    fn face(&mut self, origin: [f64; 3], u: [f64; 3], v: [f64; 3], density: f64, label: u8) {
        let area = norm(u) * norm(v);
        for _ in 0..self.count(area, density) {
            let (a, b): (f64, f64) = (self.rng.random(), self.rng.random());
            self.push(std::array::from_fn(|i| origin[i] + a * u[i] + b * v[i]), label);
        }
    }
}

fn norm(v: [f64; 3]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Clone, Copy)]
enum Shape {
    Box { half: [f64; 2], height: f64 },
    Sphere { radius: f64 },
    Pole { radius: f64, height: f64 },
}

impl Shape {
    fn random(rng: &mut SeededRng) -> Self {
        match rng.random_range(0..3) {
            0 => Shape::Box {
                half: [rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)],
                height: rng.random_range(0.3..0.7),
            },
            1 => Shape::Sphere { radius: rng.random_range(0.3..0.5) },
            _ => Shape::Pole { radius: rng.random_range(0.05..0.1), height: rng.random_range(1.0..1.35) },
        }
    }

    fn footprint(&self) -> f64 {
        match *self {
            Shape::Box { half, .. } => half[0].hypot(half[1]),
            Shape::Sphere { radius } | Shape::Pole { radius, .. } => radius,
        }
    }
}

/// Ground plane plus up to `objects` non-overlapping boxes, spheres and
/// poles with points sampled on their visible surfaces. Pure in `seed`.
pub fn gen_synthetic_scene(seed: u64, params: &SceneParams) -> Result<SyntheticScene> {
    let [x0, x1] = params.x_range;
    let [y0, y1] = params.y_range;
    if !(x1 > x0 && y1 > y0 && params.density > 0.0 && params.noise_floor >= 0.0) {
        return Err(config_err!("invalid scene parameters {params:?}"));
    }
    let mut rng = seeded(seed);
    let noise = (params.noise_floor > 0.0).then(|| Normal::new(0.0, params.noise_floor).expect("positive std"));
    let mut b = Builder { rng: &mut rng, noise, points: Vec::new(), labels: Vec::new() };
    let d = params.density;

    b.face([x0, y0, params.ground_z], [x1 - x0, 0.0, 0.0], [0.0, y1 - y0, 0.0], d, GROUND);

    let mut placed: Vec<([f64; 2], f64)> = Vec::new();
    for _ in 0..params.objects {
        let shape = Shape::random(b.rng);
        let r = shape.footprint();
        let margin = r + 0.1;
        if x1 - x0 <= 2.0 * margin || y1 - y0 <= 2.0 * margin {
            continue;
        }
        let spot = (0..100).find_map(|_| {
            let c = [b.rng.random_range(x0 + margin..x1 - margin), b.rng.random_range(y0 + margin..y1 - margin)];
            let free = placed.iter().all(|(q, rq)| (c[0] - q[0]).hypot(c[1] - q[1]) > r + rq + 0.3);
            free.then_some(c)
        });
        let Some([cx, cy]) = spot else { continue };
        placed.push(([cx, cy], r));
        match shape {
            Shape::Box { half: [hx, hy], height: h } => {
                let (lx, ly) = (cx - hx, cy - hy);
                let (w, l) = (2.0 * hx, 2.0 * hy);
                b.face([lx, ly, h], [w, 0.0, 0.0], [0.0, l, 0.0], d, BOX);
                b.face([lx, ly, 0.0], [w, 0.0, 0.0], [0.0, 0.0, h], d, BOX);
                b.face([lx, ly + l, 0.0], [w, 0.0, 0.0], [0.0, 0.0, h], d, BOX);
                b.face([lx, ly, 0.0], [0.0, l, 0.0], [0.0, 0.0, h], d, BOX);
                b.face([lx + w, ly, 0.0], [0.0, l, 0.0], [0.0, 0.0, h], d, BOX);
            }
            Shape::Sphere { radius } => {
                // the part below the ground is never sampled
                let n = b.count(4.0 * PI * radius * radius, d);
                for _ in 0..n {
                    let v: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(b.rng));
                    let len = norm(v).max(1e-12);
                    let p = [cx + radius * v[0] / len, cy + radius * v[1] / len, radius + radius * v[2] / len];
                    if p[2] >= 0.0 {
                        b.push(p, SPHERE);
                    }
                }
            }
            Shape::Pole { radius, height } => {
                let n = b.count(2.0 * PI * radius * height, d);
                for _ in 0..n {
                    let t = b.rng.random_range(0.0..2.0 * PI);
                    let z = b.rng.random_range(0.0..height);
                    b.push([cx + radius * t.cos(), cy + radius * t.sin(), z], POLE);
                }
            }
        }
    }
    let (points, labels) = (b.points, b.labels);
    Ok(SyntheticScene { cloud: PointCloud::new(points, None)?, labels })
}

/// A voxelized scene with one label per non-empty voxel.
#[derive(Clone, Debug)]
pub struct LabeledVoxels {
    pub voxels: VoxelBatch,
    pub labels: Vec<u8>,
}

/// Voxelizes a scene and labels each voxel by the majority class of its
/// retained points (ties go to the lower class id).
pub fn label_voxels(scene: &SyntheticScene, cfg: &VoxelConfig) -> Result<LabeledVoxels> {
    let voxels = voxelize(&scene.cloud, cfg)?;
    let labels = (0..voxels.len())
        .map(|v| {
            let mut hist = [0usize; NUM_CLASSES];
            for &s in voxels.voxel_source(v) {
                hist[scene.labels[s as usize] as usize] += 1;
            }
            let best = hist.iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)));
            best.map_or(0, |(k, _)| k as u8)
        })
        .collect();
    Ok(LabeledVoxels { voxels, labels })
}

/// Stacks labeled scenes into one batch.
pub fn stack_labeled(parts: &[&LabeledVoxels]) -> Result<LabeledVoxels> {
    let batches: Vec<VoxelBatch> = parts.iter().map(|p| p.voxels.clone()).collect();
    Ok(LabeledVoxels {
        voxels: VoxelBatch::stack(&batches)?,
        labels: parts.iter().flat_map(|p| p.labels.iter().copied()).collect(),
    })
}

pub const IMAGE_CLASS_NAMES: [&str; NUM_CLASSES] = ["horizontal", "vertical", "checker", "blob"];

/// Synthetic `size x size` RGB image of class `class`: horizontal stripes,
/// vertical stripes, a checkerboard or a centered blob, in a random color
/// with a random phase and mild noise.
pub fn gen_synthetic_image(seed: u64, class: usize, size: usize) -> Result<Image<f32>> {
    if class >= NUM_CLASSES || size == 0 {
        return Err(config_err!("image class {class} / size {size} invalid"));
    }
    let mut rng = seeded(seed);
    let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.5..1.0));
    let period = 4;
    let phase = rng.random_range(0..period);
    let noise = Normal::new(0.0, 0.05).expect("positive std");
    let c = (size as f64 - 1.0) / 2.0;
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let on = match class {
                0 => (y + phase) / (period / 2) % 2 == 0,
                1 => (x + phase) / (period / 2) % 2 == 0,
                2 => ((x + phase) / (period / 2) + (y + phase) / (period / 2)) % 2 == 0,
                _ => ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt() < size as f64 / 3.0,
            };
            let base = if on { 1.0 } else { 0.1 };
            for col in color {
                let v: f64 = base * col + noise.sample(&mut rng);
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Image::new(size, size, data)
}

/// Gaussian jitter of std `sigma` on every point coordinate. `sigma == 0`
/// returns the cloud unchanged.
pub fn laser_noise(cloud: &PointCloud, sigma: f64, seed: u64) -> Result<PointCloud> {
    if sigma == 0.0 {
        return Ok(cloud.clone());
    }
    let n = Normal::new(0.0, sigma).map_err(|e| config_err!("laser sigma {sigma}: {e}"))?;
    let mut rng = seeded(mix_seed(seed, 0x1a5e));
    let points = cloud.points.iter().map(|p| p.map(|v| (v as f64 + n.sample(&mut rng)) as f32)).collect();
    PointCloud::new(points, cloud.intensity.clone())
}

/// Gaussian noise of std `sigma` on every pixel value, clamped to `[0, 1]`.
/// `sigma == 0` returns the image unchanged.
pub fn pixel_noise(image: &Image<f32>, sigma: f64, seed: u64) -> Result<Image<f32>> {
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let n = Normal::new(0.0, sigma).map_err(|e| config_err!("pixel sigma {sigma}: {e}"))?;
    let mut rng = seeded(mix_seed(seed, 0x919e1));
    let data = image.data.iter().map(|&v| (v as f64 + n.sample(&mut rng)).clamp(0.0, 1.0) as f32).collect();
    Image::new(image.height, image.width, data)
}
