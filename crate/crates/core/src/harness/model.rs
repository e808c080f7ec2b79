//! Toy task models: extractor, optional SDS and GSA stages, and a linear head.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::extract::{
    encode_voxel_rows, voxel_encoder_backward, MlpCache, MlpEncoder, Reduce, VoxelBatch, VoxelEncodeCache,
};
use crate::gsa::{Gsa, GsaCache, GsaConfig};
use crate::nn::{Linear, SeededRng};
use crate::sparse_conv::{ConvGeometry, SdsBlock, SdsCache, SdsConfig};
use crate::tensor::{cast, Coord, Extent, Parameters, Scalar, SparseVoxelTensor, Value};

use super::config::ExperimentConfig;
use super::data::NUM_CLASSES;

/// Optional SDS and GSA stages applied to the extractor output.
#[derive(Clone, Debug, PartialEq)]
pub struct Trunk<T = f32> {
    pub sds: Option<SdsBlock<T>>,
    pub gsa: Option<Gsa<T>>,
}

#[derive(Clone, Debug)]
pub struct TrunkCache<T> {
    sds: Option<SdsCache<T>>,
    gsa: Option<GsaCache<T>>,
}

impl<T: Scalar> Trunk<T> {
    /// Builds the stages for an input of `channels` features on `extent`.
    pub fn new<R: Rng + ?Sized>(cfg: &ExperimentConfig, extent: Extent, channels: usize, rng: &mut R) -> Result<Self> {
        let act = cfg.extractor.activation;
        let mut grid = extent;
        let mut width = channels;
        let sds = if cfg.sds {
            let l = cfg.sds_layers;
            let sc = SdsConfig {
                in_channels: channels,
                mid_channels: l.mid_channels,
                restore_channels: l.restore_channels,
                post_channels: l.post_channels,
                out_channels: l.out_channels,
                kernel: l.kernel,
                activation: act,
            };
            grid = ConvGeometry::regular(l.kernel, 2, l.kernel / 2).output_extent(extent)?;
            width = l.out_channels;
            Some(SdsBlock::new(&sc, rng)?)
        } else {
            None
        };
        let gsa = if cfg.gsa {
            let gc = GsaConfig {
                grid: grid.as_array(),
                downsample: [1, 1, 1],
                channels: width,
                scale_widths: cfg.gsa_layers.scale_widths,
                activation: act,
            };
            Some(Gsa::new(gc, rng)?)
        } else {
            None
        };
        Ok(Self { sds, gsa })
    }

    pub fn is_identity(&self) -> bool {
        self.sds.is_none() && self.gsa.is_none()
    }

    pub fn out_channels(&self, input: usize) -> usize {
        let c = self.sds.as_ref().map_or(input, SdsBlock::out_channels);
        self.gsa.as_ref().map_or(c, Gsa::out_channels)
    }

    /// Voxel-to-trunk-row stride: 2 when SDS down-samples, else 1.
    pub fn stride(&self) -> u32 {
        if self.sds.is_some() {
            2
        } else {
            1
        }
    }

    pub fn forward(&self, x: &SparseVoxelTensor<T>) -> Result<(SparseVoxelTensor<T>, TrunkCache<T>)> {
        let mut h = x.clone();
        let mut cache = TrunkCache { sds: None, gsa: None };
        if let Some(sds) = &self.sds {
            let (y, c) = sds.forward(&h)?;
            h = y;
            cache.sds = Some(c);
        }
        if let Some(gsa) = &self.gsa {
            let (y, c) = gsa.forward(&h)?;
            h = y;
            cache.gsa = Some(c);
        }
        Ok((h, cache))
    }

    pub fn backward(&mut self, cache: &TrunkCache<T>, grad_out: &[T]) -> Result<Vec<T>> {
        let mut g = grad_out.to_vec();
        if let (Some(gsa), Some(c)) = (self.gsa.as_mut(), cache.gsa.as_ref()) {
            g = gsa.backward(c, &g)?;
        }
        if let (Some(sds), Some(c)) = (self.sds.as_mut(), cache.sds.as_ref()) {
            g = sds.backward(c, &g)?;
        }
        Ok(g)
    }

    pub fn cast<U: Scalar>(&self) -> Trunk<U> {
        Trunk { sds: self.sds.as_ref().map(SdsBlock::cast), gsa: self.gsa.as_ref().map(Gsa::cast) }
    }
}

impl<T: Scalar> Parameters<T> for Trunk<T> {
    fn params(&self) -> Vec<&Value<T>> {
        let mut v = self.sds.as_ref().map_or_else(Vec::new, |s| s.params());
        v.extend(self.gsa.as_ref().map_or_else(Vec::new, |g| g.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Value<T>> {
        let mut v = self.sds.as_mut().map_or_else(Vec::new, |s| s.params_mut());
        v.extend(self.gsa.as_mut().map_or_else(Vec::new, |g| g.params_mut()));
        v
    }
}

/// Per-voxel classifier. The head sees each voxel's extractor feature next
/// to the trunk feature of the voxel's parent cell.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelSegModel<T = f32> {
    pub encoder: MlpEncoder<T>,
    pub reduce: Reduce,
    pub trunk: Trunk<T>,
    pub head: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct VoxelSegCache<T> {
    encoder: VoxelEncodeCache<T>,
    trunk: TrunkCache<T>,
    trunk_shape: (usize, usize),
    parent: Vec<usize>,
    head_input: Vec<T>,
    enc_channels: usize,
}

impl<T: Scalar> VoxelSegModel<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &ExperimentConfig, rng: &mut R) -> Result<Self> {
        let ex = &cfg.extractor;
        let encoder = MlpEncoder::new(&ex.widths(6), ex.activation, ex.dropout, rng)?;
        let trunk = Trunk::new(cfg, ex.voxel.extent(), ex.features, rng)?;
        let head_in = if trunk.is_identity() { ex.features } else { ex.features + trunk.out_channels(ex.features) };
        Ok(Self { encoder, reduce: ex.reduce, trunk, head: Linear::new(head_in, NUM_CLASSES, rng) })
    }

    pub fn forward(
        &self,
        vb: &VoxelBatch,
        rows: &[T],
        dropout: Option<&mut SeededRng>,
    ) -> Result<(Vec<T>, VoxelSegCache<T>)> {
        let (enc, enc_cache) = encode_voxel_rows(vb, rows, &self.encoder, self.reduce, dropout)?;
        let c = enc.channels();
        let n = enc.len();
        let (head_input, trunk_cache, trunk_shape, parent) = if self.trunk.is_identity() {
            (enc.features().to_vec(), TrunkCache { sds: None, gsa: None }, (0, 0), Vec::new())
        } else {
            let (t, tc) = self.trunk.forward(&enc)?;
            let s = self.trunk.stride();
            let ct = t.channels();
            let mut parent = Vec::with_capacity(n);
            let mut input = Vec::with_capacity(n * (c + ct));
            for (i, coord) in enc.coords().iter().enumerate() {
                let p = Coord::new(coord.b, coord.z / s, coord.y / s, coord.x / s);
                let j = t.find(&p).ok_or_else(|| Error::State(format!("voxel {coord:?} has no parent cell")))?;
                parent.push(j);
                input.extend_from_slice(enc.row(i));
                input.extend_from_slice(t.row(j));
            }
            (input, tc, (t.len(), ct), parent)
        };
        let logits = self.head.forward(&head_input, n);
        Ok((
            logits,
            VoxelSegCache { encoder: enc_cache, trunk: trunk_cache, trunk_shape, parent, head_input, enc_channels: c },
        ))
    }

    /// Accumulates every parameter gradient; returns the gradient of the
    /// point rows.
    pub fn backward(&mut self, cache: &VoxelSegCache<T>, grad_logits: &[T]) -> Result<Vec<T>> {
        let c = cache.enc_channels;
        let n = grad_logits.len() / NUM_CLASSES;
        let g_head = self.head.backward(&cache.head_input, n, grad_logits);
        let g_enc = if self.trunk.is_identity() {
            g_head
        } else {
            let (tn, ct) = cache.trunk_shape;
            let w = c + ct;
            let mut g_enc = Vec::with_capacity(n * c);
            let mut g_trunk = vec![T::zero(); tn * ct];
            for (i, &j) in cache.parent.iter().enumerate() {
                let row = &g_head[i * w..(i + 1) * w];
                g_enc.extend_from_slice(&row[..c]);
                g_trunk[j * ct..(j + 1) * ct].iter_mut().zip(&row[c..]).for_each(|(a, &b)| *a += b);
            }
            let g_back = self.trunk.backward(&cache.trunk, &g_trunk)?;
            g_enc.iter_mut().zip(&g_back).for_each(|(a, &b)| *a += b);
            g_enc
        };
        Ok(voxel_encoder_backward(&mut self.encoder, &cache.encoder, &g_enc))
    }

    pub fn cast<U: Scalar>(&self) -> VoxelSegModel<U> {
        VoxelSegModel {
            encoder: self.encoder.cast(),
            reduce: self.reduce,
            trunk: self.trunk.cast(),
            head: self.head.cast(),
        }
    }
}

impl<T: Scalar> Parameters<T> for VoxelSegModel<T> {
    fn params(&self) -> Vec<&Value<T>> {
        let mut v = self.encoder.params();
        v.extend(self.trunk.params());
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Value<T>> {
        let mut v = self.encoder.params_mut();
        v.extend(self.trunk.params_mut());
        v.extend(self.head.params_mut());
        v
    }
}

/// Image classifier: patches on a depth-1 sparse grid, trunk, mean pool per
/// image, linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageClsModel<T = f32> {
    pub encoder: MlpEncoder<T>,
    pub trunk: Trunk<T>,
    pub head: Linear<T>,
    pub grid: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct ImageClsCache<T> {
    encoder: MlpCache<T>,
    trunk: TrunkCache<T>,
    pooled: Vec<T>,
    /// Batch index of every trunk row.
    owner: Vec<usize>,
    counts: Vec<usize>,
    trunk_channels: usize,
}

impl<T: Scalar> ImageClsModel<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &ExperimentConfig, rng: &mut R) -> Result<Self> {
        let ex = &cfg.extractor;
        let pc = ex.patch_config();
        let grid = (cfg.data.image_size / pc.patch_h, cfg.data.image_size / pc.patch_w);
        let encoder = MlpEncoder::new(&ex.widths(pc.row_len()), ex.activation, ex.dropout, rng)?;
        let trunk = Trunk::new(cfg, Extent::new(1, grid.0, grid.1), ex.features, rng)?;
        let head = Linear::new(trunk.out_channels(ex.features), NUM_CLASSES, rng);
        Ok(Self { encoder, trunk, head, grid })
    }

    /// `patches` holds `batch * gh * gw` rows in image, then row-major patch
    /// order. Returns `batch x K` logits.
    pub fn forward(
        &self,
        patches: &[T],
        batch: usize,
        dropout: Option<&mut SeededRng>,
    ) -> Result<(Vec<T>, ImageClsCache<T>)> {
        let (gh, gw) = self.grid;
        let n = batch * gh * gw;
        let (f, enc_cache) = self.encoder.forward(patches, n, dropout)?;
        let c = self.encoder.output_dim();
        let mut coords = Vec::with_capacity(n);
        for b in 0..batch {
            for y in 0..gh {
                for x in 0..gw {
                    coords.push(Coord::new(b as u32, 0, y as u32, x as u32));
                }
            }
        }
        let s = SparseVoxelTensor::new(Extent::new(1, gh, gw), batch, c, coords, f)?;
        let (t, trunk_cache) = self.trunk.forward(&s)?;
        let ct = t.channels();
        let mut pooled = vec![T::zero(); batch * ct];
        let mut counts = vec![0usize; batch];
        let mut owner = Vec::with_capacity(t.len());
        for (i, coord) in t.coords().iter().enumerate() {
            let b = coord.b as usize;
            owner.push(b);
            counts[b] += 1;
            pooled[b * ct..(b + 1) * ct].iter_mut().zip(t.row(i)).for_each(|(a, &v)| *a += v);
        }
        for b in 0..batch {
            let inv = cast::<f64, T>(1.0 / counts[b].max(1) as f64);
            pooled[b * ct..(b + 1) * ct].iter_mut().for_each(|v| *v *= inv);
        }
        let logits = self.head.forward(&pooled, batch);
        Ok((
            logits,
            ImageClsCache { encoder: enc_cache, trunk: trunk_cache, pooled, owner, counts, trunk_channels: ct },
        ))
    }

    /// Accumulates every parameter gradient; returns the gradient of the
    /// patch rows.
    pub fn backward(&mut self, cache: &ImageClsCache<T>, grad_logits: &[T]) -> Result<Vec<T>> {
        let batch = cache.counts.len();
        let ct = cache.trunk_channels;
        let g_pool = self.head.backward(&cache.pooled, batch, grad_logits);
        let mut g_t = Vec::with_capacity(cache.owner.len() * ct);
        for &b in &cache.owner {
            let inv = cast::<f64, T>(1.0 / cache.counts[b] as f64);
            g_t.extend(g_pool[b * ct..(b + 1) * ct].iter().map(|&g| g * inv));
        }
        let g_enc = self.trunk.backward(&cache.trunk, &g_t)?;
        Ok(self.encoder.backward(&cache.encoder, &g_enc))
    }

    pub fn cast<U: Scalar>(&self) -> ImageClsModel<U> {
        ImageClsModel {
            encoder: self.encoder.cast(),
            trunk: self.trunk.cast(),
            head: self.head.cast(),
            grid: self.grid,
        }
    }
}

impl<T: Scalar> Parameters<T> for ImageClsModel<T> {
    fn params(&self) -> Vec<&Value<T>> {
        let mut v = self.encoder.params();
        v.extend(self.trunk.params());
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Value<T>> {
        let mut v = self.encoder.params_mut();
        v.extend(self.trunk.params_mut());
        v.extend(self.head.params_mut());
        v
    }
}

/// Mean softmax cross-entropy over `labels.len()` rows of `k` logits.
/// Returns the loss and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &[T], labels: &[u8], k: usize) -> Result<(f64, Vec<T>)> {
    let n = labels.len();
    if logits.len() != n * k || n == 0 {
        return Err(shape_err!("{} logits for {n} rows of {k} classes", logits.len()));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n * k);
    for (row, &y) in logits.chunks(k).zip(labels) {
        if y as usize >= k {
            return Err(shape_err!("label {y} outside {k} classes"));
        }
        let z: Vec<f64> = row.iter().map(|&v| cast::<T, f64>(v)).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
        let log_sum = m + sum.ln();
        loss += log_sum - z[y as usize];
        for (j, &v) in z.iter().enumerate() {
            let p = (v - log_sum).exp();
            let t = if j == y as usize { 1.0 } else { 0.0 };
            grad.push(cast::<f64, T>((p - t) / n as f64));
        }
    }
    let loss = loss / n as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {loss}")));
    }
    Ok((loss, grad))
}

/// Row-wise argmax; ties go to the lower class.
pub fn predict<T: Scalar>(logits: &[T], k: usize) -> Vec<u8> {
    logits
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best as u8
        })
        .collect()
}
