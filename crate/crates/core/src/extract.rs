//! Feature extractors: image patch partitioning with a shared MLP encoder, and
//! point-cloud voxelization with per-voxel sampling and centroid augmentation.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::nn::{dropout_mask, mix_seed, seeded, Activation, Linear, SeededRng};
use crate::tensor::{cast, Coord, CoordSet, DenseTensor, Extent, Parameters, Scalar, SparseVoxelTensor, Value};

// ---------------------------------------------------------------------------
// MLP encoder
// ---------------------------------------------------------------------------

/// Shared-parameter MLP. Hidden layers are `linear -> activation -> dropout`,
/// the output layer is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpEncoder<T = f32> {
    pub layers: Vec<Linear<T>>,
    pub activation: Activation,
    pub dropout_rate: f64,
}

/// Saved activations for [`MlpEncoder::backward`].
#[derive(Clone, Debug)]
pub struct MlpCache<T> {
    rows: usize,
    inputs: Vec<Vec<T>>,
    pre: Vec<Vec<T>>,
    masks: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> MlpEncoder<T> {
    /// `widths` lists every layer width including input and output.
    pub fn new<R: Rng + ?Sized>(
        widths: &[usize],
        activation: Activation,
        dropout_rate: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(config_err!("MLP widths {widths:?} need >= 2 positive entries"));
        }
        let layers = widths.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect();
        Self::from_layers(layers, activation, dropout_rate)
    }

    pub fn from_layers(layers: Vec<Linear<T>>, activation: Activation, dropout_rate: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(config_err!("MLP needs at least one layer"));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(config_err!("dropout rate {dropout_rate} outside [0, 1)"));
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(shape_err!(
                    "layer widths {} -> {} do not chain",
                    pair[0].output_dim(),
                    pair[1].input_dim()
                ));
            }
        }
        Ok(Self { layers, activation, dropout_rate })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(Linear::output_dim).unwrap_or(0)
    }

    /// Row-wise forward over a `rows x input_dim` matrix. Passing an RNG turns
    /// on training-mode dropout; `None` is evaluation mode.
    pub fn forward(&self, x: &[T], rows: usize, mut dropout: Option<&mut SeededRng>) -> Result<(Vec<T>, MlpCache<T>)> {
        if x.len() != rows * self.input_dim() {
            return Err(shape_err!("MLP expects {} x {} inputs, got {} values", rows, self.input_dim(), x.len()));
        }
        let last = self.layers.len() - 1;
        let mut cache = MlpCache { rows, inputs: Vec::new(), pre: Vec::new(), masks: Vec::new() };
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let y = layer.forward(&h, rows);
            cache.inputs.push(h);
            if i == last {
                h = y;
                break;
            }
            let mut a = y.clone();
            self.activation.apply_slice(&mut a);
            let mask = match dropout.as_deref_mut() {
                Some(rng) if self.dropout_rate > 0.0 => {
                    let m: Vec<T> = dropout_mask(a.len(), self.dropout_rate, rng);
                    a.iter_mut().zip(&m).for_each(|(v, &k)| *v *= k);
                    Some(m)
                }
                _ => None,
            };
            cache.pre.push(y);
            cache.masks.push(mask);
            h = a;
        }
        Ok((h, cache))
    }

    /// Single-sample forward in evaluation mode.
    pub fn forward_one(&self, x: &[T]) -> Result<Vec<T>> {
        self.forward(x, 1, None).map(|(y, _)| y)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &MlpCache<T>, grad_out: &[T]) -> Vec<T> {
        let mut g = grad_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            if i < self.layers.len() - 1 {
                if let Some(mask) = &cache.masks[i] {
                    g.iter_mut().zip(mask).for_each(|(v, &k)| *v *= k);
                }
                self.activation.backprop(&cache.pre[i], &mut g);
            }
            g = self.layers[i].backward(&cache.inputs[i], cache.rows, &g);
        }
        g
    }

    pub fn cast<U: Scalar>(&self) -> MlpEncoder<U> {
        MlpEncoder {
            layers: self.layers.iter().map(Linear::cast).collect(),
            activation: self.activation,
            dropout_rate: self.dropout_rate,
        }
    }
}

impl<T: Scalar> Parameters<T> for MlpEncoder<T> {
    fn params(&self) -> Vec<&Value<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Value<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

// ---------------------------------------------------------------------------
// Images and patches
// ---------------------------------------------------------------------------

/// `H x W x 3` image, channel-last, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T = f32> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(shape_err!("{height}x{width}x3 image needs {} values, got {}", height * width * 3, data.len()));
        }
        Ok(Self { height, width, data })
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[T] {
        let i = (row * self.width + col) * 3;
        &self.data[i..i + 3]
    }
}

impl Image<f32> {
    /// Loads an 8-bit RGB image and normalizes to `[0, 1]`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref()).map_err(|e| Error::Format(e.to_string()))?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        Self::new(h as usize, w as usize, data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImagePatchConfig {
    pub patch_h: usize,
    pub patch_w: usize,
    /// Encoder output width.
    pub out_dim: usize,
}

impl ImagePatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_h == 0 || self.patch_w == 0 || self.out_dim == 0 {
            return Err(config_err!("patch sides and encoder width must be >= 1"));
        }
        Ok(())
    }

    pub fn row_len(&self) -> usize {
        self.patch_h * self.patch_w * 3
    }
}

/// Flattened non-overlapping patches in grid (row-major) order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet<T = f32> {
    pub patches: Vec<T>,
    pub row_len: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    /// Grid position `(row, col)` of each patch.
    pub origin: Vec<(usize, usize)>,
}

impl<T: Scalar> PatchSet<T> {
    pub fn count(&self) -> usize {
        self.origin.len()
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.patches[i * self.row_len..(i + 1) * self.row_len]
    }

    /// Reassembles the image the patches were cut from.
    pub fn assemble(&self) -> Image<T> {
        let (h, w) = (self.grid_h * self.patch_h, self.grid_w * self.patch_w);
        let mut data = vec![T::zero(); h * w * 3];
        for (i, &(gr, gc)) in self.origin.iter().enumerate() {
            let row = self.row(i);
            for py in 0..self.patch_h {
                for px in 0..self.patch_w {
                    let dst = ((gr * self.patch_h + py) * w + gc * self.patch_w + px) * 3;
                    let src = (py * self.patch_w + px) * 3;
                    data[dst..dst + 3].copy_from_slice(&row[src..src + 3]);
                }
            }
        }
        Image { height: h, width: w, data }
    }
}

/// Cuts an image into `patch_h x patch_w` tiles. Dimensions must divide
/// exactly; no padding is applied.
pub fn partition_image<T: Scalar>(image: &Image<T>, cfg: &ImagePatchConfig) -> Result<PatchSet<T>> {
    cfg.validate()?;
    if !image.height.is_multiple_of(cfg.patch_h) || !image.width.is_multiple_of(cfg.patch_w) {
        return Err(config_err!(
            "image {}x{} is not a multiple of patch {}x{}",
            image.height,
            image.width,
            cfg.patch_h,
            cfg.patch_w
        ));
    }
    let (gh, gw) = (image.height / cfg.patch_h, image.width / cfg.patch_w);
    let row_len = cfg.row_len();
    let mut patches = Vec::with_capacity(gh * gw * row_len);
    let mut origin = Vec::with_capacity(gh * gw);
    for gr in 0..gh {
        for gc in 0..gw {
            for py in 0..cfg.patch_h {
                let start = ((gr * cfg.patch_h + py) * image.width + gc * cfg.patch_w) * 3;
                patches.extend_from_slice(&image.data[start..start + cfg.patch_w * 3]);
            }
            origin.push((gr, gc));
        }
    }
    Ok(PatchSet { patches, row_len, grid_h: gh, grid_w: gw, patch_h: cfg.patch_h, patch_w: cfg.patch_w, origin })
}

/// Applies the shared MLP to every patch row. Returns an `N_c x D_c` matrix.
pub fn encode_patches<T: Scalar>(
    p: &PatchSet<T>,
    mlp: &MlpEncoder<T>,
    dropout: Option<&mut SeededRng>,
) -> Result<(DenseTensor<T>, MlpCache<T>)> {
    if mlp.input_dim() != p.row_len {
        return Err(shape_err!("MLP input width {} != patch length {}", mlp.input_dim(), p.row_len));
    }
    let (y, cache) = mlp.forward(&p.patches, p.count(), dropout)?;
    Ok((DenseTensor::new(vec![p.count(), mlp.output_dim()], y)?, cache))
}

// ---------------------------------------------------------------------------
// Point clouds and voxelization
// ---------------------------------------------------------------------------

/// Unordered list of `(x, y, z)` points in meters.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<[f32; 3]>,
    pub intensity: Option<Vec<f32>>,
}

impl PointCloud {
    pub fn new(points: Vec<[f32; 3]>, intensity: Option<Vec<f32>>) -> Result<Self> {
        if let Some(i) = &intensity {
            if i.len() != points.len() {
                return Err(shape_err!("{} intensities for {} points", i.len(), points.len()));
            }
        }
        if let Some(p) = points.iter().find(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric(format!("non-finite point {p:?}")));
        }
        Ok(Self { points, intensity })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Parses the raw scan layout: little-endian `f32` quadruples
    /// `(x, y, z, intensity)`.
    pub fn from_bin(bytes: &[u8]) -> Result<Self> {
        if !bytes.len().is_multiple_of(16) {
            return Err(Error::Format(format!("scan length {} is not a multiple of 16 bytes", bytes.len())));
        }
        let mut points = Vec::with_capacity(bytes.len() / 16);
        let mut intensity = Vec::with_capacity(bytes.len() / 16);
        for rec in bytes.chunks_exact(16) {
            let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap());
            points.push([f(0), f(1), f(2)]);
            intensity.push(f(3));
        }
        Self::new(points, Some(intensity))
    }

    pub fn to_bin(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.points.len() * 16);
        for (i, p) in self.points.iter().enumerate() {
            let r = self.intensity.as_ref().map_or(0.0, |v| v[i]);
            for v in [p[0], p[1], p[2], r] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn load_bin(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bin(&std::fs::read(path)?)
    }
}

/// Voxel grid description. Axis arrays are ordered `(x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoxelConfig {
    pub range_min: [f64; 3],
    pub range_max: [f64; 3],
    pub voxel_size: [f64; 3],
    /// Maximum retained points per voxel, T.
    pub max_points: usize,
    pub seed: u64,
}

impl VoxelConfig {
    /// KITTI detection setup: `[2, 46.8] x [-30.08, 30.08] x [-3, 1]`, 0.16 m voxels.
    pub fn kitti() -> Self {
        Self {
            range_min: [2.0, -30.08, -3.0],
            range_max: [46.8, 30.08, 1.0],
            voxel_size: [0.16; 3],
            max_points: 32,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            let (lo, hi, s) = (self.range_min[a], self.range_max[a], self.voxel_size[a]);
            if !(lo.is_finite() && hi.is_finite() && s.is_finite()) || hi <= lo || s <= 0.0 {
                return Err(config_err!("axis {a}: range [{lo}, {hi}) with voxel side {s} is invalid"));
            }
        }
        if self.max_points == 0 {
            return Err(config_err!("max_points must be >= 1"));
        }
        Ok(())
    }

    /// Voxel counts along `(x, y, z)`. Ranges that are an exact multiple of the
    /// side (up to float noise) are not rounded up.
    pub fn grid_dims(&self) -> [usize; 3] {
        std::array::from_fn(|a| {
            let n = (self.range_max[a] - self.range_min[a]) / self.voxel_size[a];
            let r = n.round();
            if (n - r).abs() <= 1e-9 * r.max(1.0) {
                r as usize
            } else {
                n.ceil() as usize
            }
        })
    }

    /// Grid as `(D, H, W)` = `(z, y, x)`.
    pub fn extent(&self) -> Extent {
        let [nx, ny, nz] = self.grid_dims();
        Extent::new(nz, ny, nx)
    }

    /// Voxel holding `p`, or `None` outside `[range_min, range_max)`.
    pub fn voxel_of(&self, p: &[f32; 3]) -> Option<[u32; 3]> {
        let dims = self.grid_dims();
        let mut idx = [0u32; 3];
        for a in 0..3 {
            let v = p[a] as f64;
            if v < self.range_min[a] || v >= self.range_max[a] {
                return None;
            }
            let i = ((v - self.range_min[a]) / self.voxel_size[a]).floor() as usize;
            idx[a] = i.min(dims[a] - 1) as u32;
        }
        Some(idx)
    }
}

/// Point bookkeeping from one voxelization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct VoxelStats {
    pub total: usize,
    pub retained: usize,
    /// In range but removed by per-voxel sampling.
    pub dropped: usize,
    pub out_of_range: usize,
}

impl VoxelStats {
    fn merge(&mut self, o: &VoxelStats) {
        self.total += o.total;
        self.retained += o.retained;
        self.dropped += o.dropped;
        self.out_of_range += o.out_of_range;
    }
}

/// Non-empty voxels with their retained points and 6-dim augmented rows.
/// Per-voxel data is stored contiguously; `offsets[i]..offsets[i + 1]`
/// addresses voxel `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelBatch {
    pub extent: Extent,
    pub batch: usize,
    pub voxel_coords: Vec<Coord>,
    pub offsets: Vec<usize>,
    pub points: Vec<[f32; 3]>,
    /// Index of each retained point in its source cloud.
    pub source: Vec<u32>,
    pub augmented: Vec<[f32; 6]>,
    pub stats: VoxelStats,
}

impl VoxelBatch {
    pub fn len(&self) -> usize {
        self.voxel_coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxel_coords.is_empty()
    }

    pub fn voxel_points(&self, i: usize) -> &[[f32; 3]] {
        &self.points[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn voxel_augmented(&self, i: usize) -> &[[f32; 6]] {
        &self.augmented[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn voxel_source(&self, i: usize) -> &[u32] {
        &self.source[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Concatenates single-cloud batches; batch `k` gets batch index `k`.
    pub fn stack(parts: &[VoxelBatch]) -> Result<VoxelBatch> {
        let first = parts.first().ok_or_else(|| shape_err!("nothing to stack"))?;
        let mut out = VoxelBatch {
            extent: first.extent,
            batch: 0,
            voxel_coords: Vec::new(),
            offsets: vec![0],
            points: Vec::new(),
            source: Vec::new(),
            augmented: Vec::new(),
            stats: VoxelStats::default(),
        };
        for p in parts {
            if p.extent != first.extent || p.batch != 1 {
                return Err(shape_err!("can only stack single-cloud batches on one grid"));
            }
            let b = out.batch as u32;
            let base = out.points.len();
            out.voxel_coords.extend(p.voxel_coords.iter().map(|c| Coord { b, ..*c }));
            out.offsets.extend(p.offsets[1..].iter().map(|o| o + base));
            out.points.extend_from_slice(&p.points);
            out.source.extend_from_slice(&p.source);
            out.augmented.extend_from_slice(&p.augmented);
            out.stats.merge(&p.stats);
            out.batch += 1;
        }
        Ok(out)
    }
}

/// Buckets points into voxels, subsamples crowded voxels to `max_points`, and
/// augments every retained point with its offset from the voxel centroid.
pub fn voxelize(pc: &PointCloud, cfg: &VoxelConfig) -> Result<VoxelBatch> {
    cfg.validate()?;
    let mut buckets: BTreeMap<Coord, Vec<u32>> = BTreeMap::new();
    let mut out_of_range = 0;
    for (i, p) in pc.points.iter().enumerate() {
        match cfg.voxel_of(p) {
            Some([x, y, z]) => buckets.entry(Coord::new(0, z, y, x)).or_default().push(i as u32),
            None => out_of_range += 1,
        }
    }
    let cap = cfg.max_points;
    let voxels: Vec<(Coord, Vec<u32>)> = buckets.into_iter().collect();
    let sampled: Vec<Vec<u32>> = voxels
        .par_iter()
        .map(|(c, idx)| {
            if idx.len() <= cap {
                return idx.clone();
            }
            let stream = ((c.z as u64) << 42) | ((c.y as u64) << 21) | c.x as u64;
            let mut rng = seeded(mix_seed(cfg.seed, stream));
            reservoir_sample(idx, cap, &mut rng)
        })
        .collect();

    let mut offsets = Vec::with_capacity(voxels.len() + 1);
    offsets.push(0);
    let mut points = Vec::new();
    let mut source = Vec::new();
    let mut augmented = Vec::new();
    for kept in &sampled {
        let mut centroid = [0.0f64; 3];
        for &i in kept {
            let p = pc.points[i as usize];
            for a in 0..3 {
                centroid[a] += p[a] as f64;
            }
        }
        centroid.iter_mut().for_each(|c| *c /= kept.len() as f64);
        for &i in kept {
            let p = pc.points[i as usize];
            points.push(p);
            source.push(i);
            augmented.push([
                p[0],
                p[1],
                p[2],
                (p[0] as f64 - centroid[0]) as f32,
                (p[1] as f64 - centroid[1]) as f32,
                (p[2] as f64 - centroid[2]) as f32,
            ]);
        }
        offsets.push(points.len());
    }
    let retained = points.len();
    Ok(VoxelBatch {
        extent: cfg.extent(),
        batch: 1,
        voxel_coords: voxels.into_iter().map(|(c, _)| c).collect(),
        offsets,
        points,
        source,
        augmented,
        stats: VoxelStats { total: pc.len(), retained, dropped: pc.len() - out_of_range - retained, out_of_range },
    })
}

/// Reservoir sampling of `k` items; the result keeps the input order.
fn reservoir_sample<R: Rng + ?Sized>(items: &[u32], k: usize, rng: &mut R) -> Vec<u32> {
    let mut slots: Vec<usize> = (0..k).collect();
    for i in k..items.len() {
        let j = rng.random_range(0..=i);
        if j < k {
            slots[j] = i;
        }
    }
    slots.sort_unstable();
    slots.into_iter().map(|i| items[i]).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Reduce {
    #[default]
    Max,
    Mean,
}

/// Saved state for [`voxel_encoder_backward`].
#[derive(Clone, Debug)]
pub struct VoxelEncodeCache<T> {
    mlp: MlpCache<T>,
    offsets: Vec<usize>,
    /// For max-reduce: winning point row per `(voxel, channel)`.
    argmax: Vec<usize>,
    reduce: Reduce,
    channels: usize,
}

/// Augmented rows of a batch as a `P x 6` matrix.
pub fn augmented_rows<T: Scalar>(vb: &VoxelBatch) -> Vec<T> {
    vb.augmented.iter().flat_map(|r| r.iter().map(|&v| cast::<f32, T>(v))).collect()
}

/// Runs the shared MLP on every retained point and reduces each voxel's point
/// features to one row.
pub fn encode_voxels<T: Scalar>(
    vb: &VoxelBatch,
    mlp: &MlpEncoder<T>,
    reduce: Reduce,
    dropout: Option<&mut SeededRng>,
) -> Result<(SparseVoxelTensor<T>, VoxelEncodeCache<T>)> {
    encode_voxel_rows(vb, &augmented_rows(vb), mlp, reduce, dropout)
}

/// As [`encode_voxels`] with explicit point rows (one 6-vector per retained
/// point), which lets gradient probes perturb the inputs.
pub fn encode_voxel_rows<T: Scalar>(
    vb: &VoxelBatch,
    rows: &[T],
    mlp: &MlpEncoder<T>,
    reduce: Reduce,
    dropout: Option<&mut SeededRng>,
) -> Result<(SparseVoxelTensor<T>, VoxelEncodeCache<T>)> {
    if mlp.input_dim() != 6 {
        return Err(shape_err!("voxel MLP input width must be 6, got {}", mlp.input_dim()));
    }
    let n_pts = vb.points.len();
    let (h, mlp_cache) = mlp.forward(rows, n_pts, dropout)?;
    let c = mlp.output_dim();
    let mut features = Vec::with_capacity(vb.len() * c);
    let mut argmax = Vec::new();
    for v in 0..vb.len() {
        let (lo, hi) = (vb.offsets[v], vb.offsets[v + 1]);
        for ch in 0..c {
            match reduce {
                Reduce::Max => {
                    let mut best = lo;
                    for p in lo + 1..hi {
                        if h[p * c + ch] > h[best * c + ch] {
                            best = p;
                        }
                    }
                    argmax.push(best);
                    features.push(h[best * c + ch]);
                }
                Reduce::Mean => {
                    let s: T = (lo..hi).map(|p| h[p * c + ch]).sum();
                    features.push(s / cast::<f64, T>((hi - lo) as f64));
                }
            }
        }
    }
    let set = Arc::new(CoordSet::from_sorted(vb.voxel_coords.clone()));
    let out = SparseVoxelTensor::from_parts(vb.extent, vb.batch, c, set, features);
    Ok((out, VoxelEncodeCache { mlp: mlp_cache, offsets: vb.offsets.clone(), argmax, reduce, channels: c }))
}

/// Backward of [`encode_voxels`]; returns the gradient w.r.t. the point rows.
pub fn voxel_encoder_backward<T: Scalar>(
    mlp: &mut MlpEncoder<T>,
    cache: &VoxelEncodeCache<T>,
    grad_features: &[T],
) -> Vec<T> {
    let c = cache.channels;
    let n_pts = *cache.offsets.last().unwrap_or(&0);
    let mut gh = vec![T::zero(); n_pts * c];
    for v in 0..cache.offsets.len() - 1 {
        let (lo, hi) = (cache.offsets[v], cache.offsets[v + 1]);
        for ch in 0..c {
            let g = grad_features[v * c + ch];
            match cache.reduce {
                Reduce::Max => gh[cache.argmax[v * c + ch] * c + ch] += g,
                Reduce::Mean => {
                    let share = g / cast::<f64, T>((hi - lo) as f64);
                    (lo..hi).for_each(|p| gh[p * c + ch] += share);
                }
            }
        }
    }
    mlp.backward(&cache.mlp, &gh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded;
    use rand::Rng;

    fn ramp_image(h: usize, w: usize) -> Image<f32> {
        Image::new(h, w, (0..h * w * 3).map(|v| v as f32).collect()).unwrap()
    }

    #[test]
    fn partition_counts() {
        let cfg = ImagePatchConfig { patch_h: 16, patch_w: 16, out_dim: 8 };
        let p = partition_image(&ramp_image(224, 224), &cfg).unwrap();
        assert_eq!(p.count(), 196);
        assert_eq!(p.row_len, 768);

        let img = ramp_image(16, 16);
        let p = partition_image(&img, &cfg).unwrap();
        assert_eq!(p.count(), 1);
        assert_eq!(p.row(0), &img.data[..]);

        assert!(matches!(partition_image(&ramp_image(224, 225), &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn partition_tiles_exactly() {
        let img = ramp_image(12, 20);
        let cfg = ImagePatchConfig { patch_h: 3, patch_w: 4, out_dim: 2 };
        let p = partition_image(&img, &cfg).unwrap();
        assert_eq!(p.origin[1], (0, 1));
        assert_eq!(p.assemble(), img);
    }

    #[test]
    fn identity_mlp_is_identity() {
        let n = 12;
        let mut w = vec![0.0f32; n * n];
        (0..n).for_each(|i| w[i * n + i] = 1.0);
        let lin = Linear::from_parts(Value::new(vec![n, n], w).unwrap(), Value::zeros(vec![n])).unwrap();
        let mlp = MlpEncoder::from_layers(vec![lin], Activation::Relu, 0.3).unwrap();
        let img = ramp_image(4, 4);
        let p = partition_image(&img, &ImagePatchConfig { patch_h: 2, patch_w: 2, out_dim: n }).unwrap();
        let (y, _) = encode_patches(&p, &mlp, None).unwrap();
        assert_eq!(y.data(), &p.patches[..]);
    }

    #[test]
    fn shared_parameters_and_batch_equivalence() {
        let mut rng = seeded(11);
        let mlp = MlpEncoder::<f32>::new(&[12, 16, 16, 5], Activation::Relu, 0.0, &mut rng).unwrap();
        let mut img = Image::new(4, 4, (0..48).map(|_| rng.random::<f32>()).collect()).unwrap();
        // make the two left patches identical
        for r in 0..2 {
            for c in 0..2 {
                for ch in 0..3 {
                    let v = img.data[(r * 4 + c) * 3 + ch];
                    img.data[((r + 2) * 4 + c) * 3 + ch] = v;
                }
            }
        }
        let p = partition_image(&img, &ImagePatchConfig { patch_h: 2, patch_w: 2, out_dim: 5 }).unwrap();
        let (y, _) = encode_patches(&p, &mlp, None).unwrap();
        assert_eq!(&y.data()[0..5], &y.data()[10..15]);
        for i in 0..p.count() {
            let single = mlp.forward_one(p.row(i)).unwrap();
            assert_eq!(&y.data()[i * 5..(i + 1) * 5], &single[..]);
        }
        let bad = MlpEncoder::<f32>::new(&[6, 4], Activation::Relu, 0.0, &mut rng).unwrap();
        assert!(matches!(encode_patches(&p, &bad, None), Err(Error::Shape(_))));
    }

    #[test]
    fn dropout_only_in_training() {
        let mut rng = seeded(2);
        let mlp = MlpEncoder::<f32>::new(&[4, 32, 3], Activation::Relu, 0.3, &mut rng).unwrap();
        let x = [0.1f32, 0.2, 0.3, 0.4];
        let a = mlp.forward(&x, 1, None).unwrap().0;
        let b = mlp.forward(&x, 1, None).unwrap().0;
        assert_eq!(a, b);
        let mut d = seeded(5);
        let c = mlp.forward(&x, 1, Some(&mut d)).unwrap().0;
        assert_ne!(a, c);
    }

    #[test]
    fn kitti_grid() {
        assert_eq!(VoxelConfig::kitti().grid_dims(), [280, 376, 25]);
        assert_eq!(VoxelConfig::kitti().extent(), Extent::new(25, 376, 280));
    }

    fn unit_cfg(t: usize) -> VoxelConfig {
        VoxelConfig { range_min: [-1.0; 3], range_max: [7.0; 3], voxel_size: [4.0; 3], max_points: t, seed: 9 }
    }

    #[test]
    fn centroid_augmentation() {
        let pc = PointCloud::new(vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]], None).unwrap();
        let vb = voxelize(&pc, &unit_cfg(2)).unwrap();
        assert_eq!(vb.len(), 1);
        assert_eq!(vb.voxel_augmented(0), &[[0.0, 0.0, 0.0, -1.0, 0.0, 0.0], [2.0, 0.0, 0.0, 1.0, 0.0, 0.0]]);
    }

    #[test]
    fn sampling_contract() {
        let pts: Vec<[f32; 3]> = (0..10).map(|i| [i as f32 * 0.1, 0.5, 0.5]).collect();
        let pc = PointCloud::new(pts, None).unwrap();
        let a = voxelize(&pc, &unit_cfg(5)).unwrap();
        let b = voxelize(&pc, &unit_cfg(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.voxel_points(0).len(), 5);
        assert!(a.voxel_source(0).iter().all(|&i| i < 10));
        assert!(a.voxel_source(0).windows(2).all(|w| w[0] < w[1]));
        assert_eq!(a.stats, VoxelStats { total: 10, retained: 5, dropped: 5, out_of_range: 0 });
        let mut other = unit_cfg(5);
        other.seed = 10;
        // a different seed is allowed to (and for these seeds does) pick a different subset
        assert_ne!(voxelize(&pc, &other).unwrap().source, a.source);
    }

    #[test]
    fn out_of_range_dropped_and_half_open() {
        let pc = PointCloud::new(vec![[7.0, 0.0, 0.0], [-1.0, -1.0, -1.0], [100.0, 0.0, 0.0]], None).unwrap();
        let vb = voxelize(&pc, &unit_cfg(4)).unwrap();
        assert_eq!(vb.stats.out_of_range, 2);
        assert_eq!(vb.voxel_coords, vec![Coord::new(0, 0, 0, 0)]);
    }

    #[test]
    fn bin_round_trip_and_bad_length() {
        let pc = PointCloud::new(vec![[1.0, -2.0, 3.5], [0.25, 0.0, -1.0]], Some(vec![0.5, 0.9])).unwrap();
        assert_eq!(PointCloud::from_bin(&pc.to_bin()).unwrap(), pc);
        assert!(matches!(PointCloud::from_bin(&[0u8; 15]), Err(Error::Format(_))));
        let nan = [f32::NAN, 0.0, 0.0, 0.0].iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>();
        assert!(matches!(PointCloud::from_bin(&nan), Err(Error::Numeric(_))));
    }

    #[test]
    fn encode_voxels_reductions() {
        let mut rng = seeded(4);
        let mlp = MlpEncoder::<f64>::new(&[6, 8, 4], Activation::Relu, 0.0, &mut rng).unwrap();
        let pc = PointCloud::new(vec![[1.0, 2.0, 3.0]], None).unwrap();
        let vb = voxelize(&pc, &unit_cfg(4)).unwrap();
        let (s, _) = encode_voxels(&vb, &mlp, Reduce::Max, None).unwrap();
        let direct = mlp.forward_one(&augmented_rows::<f64>(&vb)).unwrap();
        assert_eq!(s.row(0), &direct[..]);

        let pc = PointCloud::new(vec![[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]], None).unwrap();
        let vb = voxelize(&pc, &unit_cfg(4)).unwrap();
        let (s, _) = encode_voxels(&vb, &mlp, Reduce::Max, None).unwrap();
        let direct = mlp.forward_one(&augmented_rows::<f64>(&vb)[..6]).unwrap();
        assert_eq!(s.row(0), &direct[..]);

        let bad = MlpEncoder::<f64>::new(&[5, 4], Activation::Relu, 0.0, &mut rng).unwrap();
        assert!(encode_voxels(&vb, &bad, Reduce::Max, None).is_err());
    }

    #[test]
    fn encode_voxels_matches_point_loop() {
        let mut rng = seeded(21);
        let mlp = MlpEncoder::<f32>::new(&[6, 16, 8], Activation::Relu, 0.0, &mut rng).unwrap();
        let pts: Vec<[f32; 3]> = (0..300)
            .map(|_| [rng.random_range(-1.0..7.0), rng.random_range(-1.0..7.0), rng.random_range(-1.0..7.0)])
            .collect();
        let vb = voxelize(&PointCloud::new(pts, None).unwrap(), &unit_cfg(16)).unwrap();
        for reduce in [Reduce::Max, Reduce::Mean] {
            let (s, _) = encode_voxels(&vb, &mlp, reduce, None).unwrap();
            for v in 0..vb.len() {
                let outs: Vec<Vec<f32>> = vb.voxel_augmented(v).iter().map(|r| mlp.forward_one(r).unwrap()).collect();
                for ch in 0..8 {
                    let col = outs.iter().map(|o| o[ch]);
                    let want = match reduce {
                        Reduce::Max => col.fold(f32::NEG_INFINITY, f32::max),
                        Reduce::Mean => col.sum::<f32>() / outs.len() as f32,
                    };
                    assert!((s.row(v)[ch] - want).abs() <= 1e-5 * (1.0 + want.abs()));
                }
            }
        }
    }

    #[test]
    fn stack_assigns_batch_indices() {
        let pc = PointCloud::new(vec![[1.0, 2.0, 3.0]], None).unwrap();
        let vb = voxelize(&pc, &unit_cfg(4)).unwrap();
        let st = VoxelBatch::stack(&[vb.clone(), vb]).unwrap();
        assert_eq!(st.batch, 2);
        assert_eq!(st.voxel_coords[1].b, 1);
        assert_eq!(st.offsets, vec![0, 1, 2]);
    }
}
