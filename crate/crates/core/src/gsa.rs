//! Global spatial aggregation: sparse voxels are scattered into a dense grid,
//! the height axis is folded into channels to form a bird's-eye-view (BEV)
//! map, a two-scale 2D CNN mixes context, and the result is unfolded and
//! gathered back at the original voxels, then concatenated with the input
//! features.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::nn::Activation;
use crate::tensor::{
    concat_features, densify, gather_at, split_features, DenseTensor, Extent, Parameters, Scalar, SparseVoxelTensor,
    Value,
};

/// Zero-filled dense grid of a sparse tensor, `(B, C, D', H', W')`.
pub fn sparse_to_dense<T: Scalar>(s: &SparseVoxelTensor<T>) -> DenseTensor<T> {
    densify(s)
}

/// `(B, C, D', H', W')` -> `(B, C*D', H', W')` with channel `z*C + c` holding
/// slice `[:, c, z]`.
pub fn dense_to_bev<T: Scalar>(d: &DenseTensor<T>) -> Result<DenseTensor<T>> {
    let [b, c, dd, h, w] = match *d.shape() {
        [b, c, dd, h, w] => [b, c, dd, h, w],
        _ => return Err(shape_err!("dense_to_bev expects (B, C, D, H, W), got {:?}", d.shape())),
    };
    let plane = h * w;
    let src = d.data();
    let mut out = vec![T::zero(); src.len()];
    for bb in 0..b {
        for ch in 0..c {
            for z in 0..dd {
                let from = ((bb * c + ch) * dd + z) * plane;
                let to = (bb * c * dd + z * c + ch) * plane;
                out[to..to + plane].copy_from_slice(&src[from..from + plane]);
            }
        }
    }
    DenseTensor::new(vec![b, c * dd, h, w], out)
}

/// Inverse of [`dense_to_bev`] for height `depth`.
pub fn bev_to_dense<T: Scalar>(bev: &DenseTensor<T>, depth: usize) -> Result<DenseTensor<T>> {
    let [b, cb, h, w] = match *bev.shape() {
        [b, cb, h, w] => [b, cb, h, w],
        _ => return Err(shape_err!("bev_to_dense expects (B, C, H, W), got {:?}", bev.shape())),
    };
    if depth == 0 || cb % depth != 0 {
        return Err(shape_err!("{cb} BEV channels are not divisible by height {depth}"));
    }
    let c = cb / depth;
    let plane = h * w;
    let src = bev.data();
    let mut out = vec![T::zero(); src.len()];
    for bb in 0..b {
        for ch in 0..c {
            for z in 0..depth {
                let to = ((bb * c + ch) * depth + z) * plane;
                let from = (bb * cb + z * c + ch) * plane;
                out[to..to + plane].copy_from_slice(&src[from..from + plane]);
            }
        }
    }
    DenseTensor::new(vec![b, c, depth, h, w], out)
}

fn dims4<T: Scalar>(x: &DenseTensor<T>) -> Result<[usize; 4]> {
    match *x.shape() {
        [b, c, h, w] => Ok([b, c, h, w]),
        _ => Err(shape_err!("expected (B, C, H, W), got {:?}", x.shape())),
    }
}

/// Dense 2D convolution with zero padding; kernel `C_out x C_in x k_y x k_x`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dLayer<T = f32> {
    pub weight: Value<T>,
    pub bias: Value<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2dLayer<T> {
    pub fn new<R: Rng + ?Sized>(ci: usize, co: usize, k: usize, stride: usize, padding: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (ci * k * k) as f64).sqrt();
        Self { weight: Value::uniform(vec![co, ci, k, k], bound, rng), bias: Value::zeros(vec![co]), stride, padding }
    }

    pub fn from_parts(weight: Value<T>, bias: Value<T>, stride: usize, padding: usize) -> Result<Self> {
        if weight.shape.len() != 4 || bias.shape != [weight.shape[0]] || stride == 0 {
            return Err(shape_err!("conv2d weight {:?} / bias {:?} / stride {stride}", weight.shape, bias.shape));
        }
        Ok(Self { weight, bias, stride, padding })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape[0]
    }

    fn kernel(&self) -> (usize, usize) {
        (self.weight.shape[2], self.weight.shape[3])
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel();
        if h + 2 * self.padding < kh || w + 2 * self.padding < kw {
            return Err(shape_err!("{h}x{w} input too small for {kh}x{kw} kernel"));
        }
        Ok(((h + 2 * self.padding - kh) / self.stride + 1, (w + 2 * self.padding - kw) / self.stride + 1))
    }

    pub fn forward(&self, x: &DenseTensor<T>) -> Result<DenseTensor<T>> {
        let [b, ci, h, w] = dims4(x)?;
        if ci != self.in_channels() {
            return Err(shape_err!("conv2d expects {} channels, got {ci}", self.in_channels()));
        }
        let co = self.out_channels();
        let (kh, kw) = self.kernel();
        let (oh, ow) = self.output_size(h, w)?;
        let (s, p) = (self.stride as i64, self.padding as i64);
        let xs = x.data();
        let wt = &self.weight.data;
        let mut out = vec![T::zero(); b * co * oh * ow];
        out.par_chunks_mut(oh * ow).enumerate().for_each(|(bo, plane)| {
            let (bb, o) = (bo / co, bo % co);
            plane.iter_mut().for_each(|v| *v = self.bias.data[o]);
            for i in 0..ci {
                let xp = &xs[(bb * ci + i) * h * w..(bb * ci + i + 1) * h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wt[((o * ci + i) * kh + ky) * kw + kx];
                        for y in 0..oh {
                            let iy = y as i64 * s + ky as i64 - p;
                            if iy < 0 || iy >= h as i64 {
                                continue;
                            }
                            let row = &xp[iy as usize * w..(iy as usize + 1) * w];
                            for xx in 0..ow {
                                let ix = xx as i64 * s + kx as i64 - p;
                                if ix >= 0 && ix < w as i64 {
                                    plane[y * ow + xx] += wv * row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        });
        DenseTensor::new(vec![b, co, oh, ow], out)
    }

    /// Accumulates parameter gradients; returns the input gradient.
    pub fn backward(&mut self, x: &DenseTensor<T>, grad_out: &DenseTensor<T>) -> Result<DenseTensor<T>> {
        let [b, ci, h, w] = dims4(x)?;
        let co = self.out_channels();
        let (kh, kw) = self.kernel();
        let (oh, ow) = self.output_size(h, w)?;
        if grad_out.shape() != [b, co, oh, ow] {
            return Err(shape_err!("conv2d gradient shape {:?} != {:?}", grad_out.shape(), [b, co, oh, ow]));
        }
        let (s, p) = (self.stride as i64, self.padding as i64);
        let xs = x.data();
        let gs = grad_out.data();
        let wt = &self.weight.data;

        let mut gw = vec![T::zero(); wt.len()];
        gw.par_chunks_mut(ci * kh * kw).enumerate().for_each(|(o, gwo)| {
            for bb in 0..b {
                let gp = &gs[(bb * co + o) * oh * ow..(bb * co + o + 1) * oh * ow];
                for i in 0..ci {
                    let xp = &xs[(bb * ci + i) * h * w..(bb * ci + i + 1) * h * w];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let mut acc = T::zero();
                            for y in 0..oh {
                                let iy = y as i64 * s + ky as i64 - p;
                                if iy < 0 || iy >= h as i64 {
                                    continue;
                                }
                                for xx in 0..ow {
                                    let ix = xx as i64 * s + kx as i64 - p;
                                    if ix >= 0 && ix < w as i64 {
                                        acc += gp[y * ow + xx] * xp[iy as usize * w + ix as usize];
                                    }
                                }
                            }
                            gwo[(i * kh + ky) * kw + kx] += acc;
                        }
                    }
                }
            }
        });
        let mut gb = vec![T::zero(); co];
        for bb in 0..b {
            for (o, g) in gb.iter_mut().enumerate() {
                *g += gs[(bb * co + o) * oh * ow..(bb * co + o + 1) * oh * ow].iter().copied().sum::<T>();
            }
        }
        let mut gx = vec![T::zero(); xs.len()];
        gx.par_chunks_mut(h * w).enumerate().for_each(|(bi, gxp)| {
            let (bb, i) = (bi / ci, bi % ci);
            for o in 0..co {
                let gp = &gs[(bb * co + o) * oh * ow..(bb * co + o + 1) * oh * ow];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wt[((o * ci + i) * kh + ky) * kw + kx];
                        for y in 0..oh {
                            let iy = y as i64 * s + ky as i64 - p;
                            if iy < 0 || iy >= h as i64 {
                                continue;
                            }
                            for xx in 0..ow {
                                let ix = xx as i64 * s + kx as i64 - p;
                                if ix >= 0 && ix < w as i64 {
                                    gxp[iy as usize * w + ix as usize] += wv * gp[y * ow + xx];
                                }
                            }
                        }
                    }
                }
            }
        });
        self.weight.accumulate_grad(&gw);
        self.bias.accumulate_grad(&gb);
        DenseTensor::new(vec![b, ci, h, w], gx)
    }

    pub fn cast<U: Scalar>(&self) -> Conv2dLayer<U> {
        Conv2dLayer { weight: self.weight.cast(), bias: self.bias.cast(), stride: self.stride, padding: self.padding }
    }
}

impl<T: Scalar> Parameters<T> for Conv2dLayer<T> {
    fn params(&self) -> Vec<&Value<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Value<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Nearest-neighbour upsampling to exactly `(h, w)`: output `(y, x)` reads
/// input `(y / 2, x / 2)`.
pub fn upsample2x<T: Scalar>(x: &DenseTensor<T>, h: usize, w: usize) -> Result<DenseTensor<T>> {
    let [b, c, ih, iw] = dims4(x)?;
    if h.div_ceil(2) > ih || w.div_ceil(2) > iw {
        return Err(shape_err!("cannot upsample {ih}x{iw} to {h}x{w}"));
    }
    let xs = x.data();
    let mut out = Vec::with_capacity(b * c * h * w);
    for bc in 0..b * c {
        for y in 0..h {
            for xx in 0..w {
                out.push(xs[bc * ih * iw + (y / 2) * iw + xx / 2]);
            }
        }
    }
    DenseTensor::new(vec![b, c, h, w], out)
}

fn upsample2x_backward<T: Scalar>(g: &DenseTensor<T>, ih: usize, iw: usize) -> Result<DenseTensor<T>> {
    let [b, c, h, w] = dims4(g)?;
    let gs = g.data();
    let mut out = vec![T::zero(); b * c * ih * iw];
    for bc in 0..b * c {
        for y in 0..h {
            for xx in 0..w {
                out[bc * ih * iw + (y / 2) * iw + xx / 2] += gs[(bc * h + y) * w + xx];
            }
        }
    }
    DenseTensor::new(vec![b, c, ih, iw], out)
}

fn concat_channels<T: Scalar>(a: &DenseTensor<T>, b: &DenseTensor<T>) -> Result<DenseTensor<T>> {
    let [n, ca, h, w] = dims4(a)?;
    let [nb, cb, hb, wb] = dims4(b)?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(shape_err!("channel concat of {:?} and {:?}", a.shape(), b.shape()));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(a.len() + b.len());
    for i in 0..n {
        out.extend_from_slice(&a.data()[i * ca * plane..(i + 1) * ca * plane]);
        out.extend_from_slice(&b.data()[i * cb * plane..(i + 1) * cb * plane]);
    }
    DenseTensor::new(vec![n, ca + cb, h, w], out)
}

fn split_channels<T: Scalar>(g: &DenseTensor<T>, left: usize) -> Result<(DenseTensor<T>, DenseTensor<T>)> {
    let [n, c, h, w] = dims4(g)?;
    let plane = h * w;
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for i in 0..n {
        let base = i * c * plane;
        a.extend_from_slice(&g.data()[base..base + left * plane]);
        b.extend_from_slice(&g.data()[base + left * plane..base + c * plane]);
    }
    Ok((DenseTensor::new(vec![n, left, h, w], a)?, DenseTensor::new(vec![n, c - left, h, w], b)?))
}

fn activate<T: Scalar>(act: Activation, x: DenseTensor<T>) -> Result<DenseTensor<T>> {
    let shape = x.shape().to_vec();
    let mut d = x.into_data();
    act.apply_slice(&mut d);
    DenseTensor::new(shape, d)
}

fn backprop<T: Scalar>(act: Activation, pre: &DenseTensor<T>, g: DenseTensor<T>) -> Result<DenseTensor<T>> {
    let shape = g.shape().to_vec();
    let mut d = g.into_data();
    act.backprop(pre.data(), &mut d);
    DenseTensor::new(shape, d)
}

/// Global spatial aggregation settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GsaConfig {
    /// Grid before any down-sampling, `(D, H, W)`.
    pub grid: [usize; 3],
    /// Down-sampling already applied upstream per `(z, y, x)` axis.
    pub downsample: [usize; 3],
    /// Sparse feature width C.
    pub channels: usize,
    /// Widths of the full-resolution and half-resolution branches.
    pub scale_widths: [usize; 2],
    #[serde(default)]
    pub activation: Activation,
}

impl GsaConfig {
    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if self.downsample[a] == 0 || self.grid[a] == 0 || !self.grid[a].is_multiple_of(self.downsample[a]) {
                return Err(config_err!("down-sampling {:?} must divide grid {:?}", self.downsample, self.grid));
            }
        }
        if self.channels == 0 || self.scale_widths.contains(&0) {
            return Err(config_err!("GSA channel widths must be positive"));
        }
        Ok(())
    }

    /// Grid the GSA input lives on.
    pub fn extent(&self) -> Extent {
        Extent::new(
            self.grid[0] / self.downsample[0],
            self.grid[1] / self.downsample[1],
            self.grid[2] / self.downsample[2],
        )
    }

    pub fn bev_channels(&self) -> usize {
        self.channels * self.extent().d
    }
}

/// Two-scale BEV CNN. Full resolution: two 3x3 convs. Half resolution: a 3x3
/// stride-2 conv and a 3x3 conv, upsampled back. The branches are concatenated
/// and fused by a 1x1 conv. The activation follows every conv but the fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct BevCnn<T = f32> {
    pub full_a: Conv2dLayer<T>,
    pub full_b: Conv2dLayer<T>,
    pub half_a: Conv2dLayer<T>,
    pub half_b: Conv2dLayer<T>,
    pub fuse: Conv2dLayer<T>,
    pub activation: Activation,
}

#[derive(Clone, Debug)]
pub struct BevCnnCache<T> {
    input: DenseTensor<T>,
    full_a_pre: DenseTensor<T>,
    full_a_out: DenseTensor<T>,
    full_b_pre: DenseTensor<T>,
    half_a_pre: DenseTensor<T>,
    half_a_out: DenseTensor<T>,
    half_b_pre: DenseTensor<T>,
    cat: DenseTensor<T>,
}

impl<T: Scalar> BevCnn<T> {
    pub fn new<R: Rng + ?Sized>(bev_channels: usize, widths: [usize; 2], activation: Activation, rng: &mut R) -> Self {
        let [w0, w1] = widths;
        Self {
            full_a: Conv2dLayer::new(bev_channels, w0, 3, 1, 1, rng),
            full_b: Conv2dLayer::new(w0, w0, 3, 1, 1, rng),
            half_a: Conv2dLayer::new(bev_channels, w1, 3, 2, 1, rng),
            half_b: Conv2dLayer::new(w1, w1, 3, 1, 1, rng),
            fuse: Conv2dLayer::new(w0 + w1, bev_channels, 1, 1, 0, rng),
            activation,
        }
    }

    pub fn bev_channels(&self) -> usize {
        self.full_a.in_channels()
    }

    pub fn forward(&self, bev: &DenseTensor<T>) -> Result<(DenseTensor<T>, BevCnnCache<T>)> {
        let [_, c, h, w] = dims4(bev)?;
        if c != self.bev_channels() {
            return Err(shape_err!("BEV CNN expects {} channels, got {c}", self.bev_channels()));
        }
        let act = self.activation;
        let full_a_pre = self.full_a.forward(bev)?;
        let full_a_out = activate(act, full_a_pre.clone())?;
        let full_b_pre = self.full_b.forward(&full_a_out)?;
        let full = activate(act, full_b_pre.clone())?;

        let half_a_pre = self.half_a.forward(bev)?;
        let half_a_out = activate(act, half_a_pre.clone())?;
        let half_b_pre = self.half_b.forward(&half_a_out)?;
        let half = activate(act, half_b_pre.clone())?;
        let up = upsample2x(&half, h, w)?;

        let cat = concat_channels(&full, &up)?;
        let out = self.fuse.forward(&cat)?;
        let cache = BevCnnCache {
            input: bev.clone(),
            full_a_pre,
            full_a_out,
            full_b_pre,
            half_a_pre,
            half_a_out,
            half_b_pre,
            cat,
        };
        Ok((out, cache))
    }

    pub fn backward(&mut self, cache: &BevCnnCache<T>, grad_out: &DenseTensor<T>) -> Result<DenseTensor<T>> {
        let act = self.activation;
        let g_cat = self.fuse.backward(&cache.cat, grad_out)?;
        let (g_full, g_up) = split_channels(&g_cat, self.full_b.out_channels())?;

        let g = backprop(act, &cache.full_b_pre, g_full)?;
        let g = self.full_b.backward(&cache.full_a_out, &g)?;
        let g = backprop(act, &cache.full_a_pre, g)?;
        let g_in_full = self.full_a.backward(&cache.input, &g)?;

        let [_, _, hh, hw] = dims4(&cache.half_b_pre)?;
        let g = upsample2x_backward(&g_up, hh, hw)?;
        let g = backprop(act, &cache.half_b_pre, g)?;
        let g = self.half_b.backward(&cache.half_a_out, &g)?;
        let g = backprop(act, &cache.half_a_pre, g)?;
        let g_in_half = self.half_a.backward(&cache.input, &g)?;

        let shape = g_in_full.shape().to_vec();
        let mut sum = g_in_full.into_data();
        sum.iter_mut().zip(g_in_half.data()).for_each(|(a, &b)| *a += b);
        DenseTensor::new(shape, sum)
    }

    pub fn cast<U: Scalar>(&self) -> BevCnn<U> {
        BevCnn {
            full_a: self.full_a.cast(),
            full_b: self.full_b.cast(),
            half_a: self.half_a.cast(),
            half_b: self.half_b.cast(),
            fuse: self.fuse.cast(),
            activation: self.activation,
        }
    }
}

impl<T: Scalar> Parameters<T> for BevCnn<T> {
    fn params(&self) -> Vec<&Value<T>> {
        [&self.full_a, &self.full_b, &self.half_a, &self.half_b, &self.fuse]
            .into_iter()
            .flat_map(|l| l.params())
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Value<T>> {
        let mut v = self.full_a.params_mut();
        v.extend(self.full_b.params_mut());
        v.extend(self.half_a.params_mut());
        v.extend(self.half_b.params_mut());
        v.extend(self.fuse.params_mut());
        v
    }
}

pub fn bev_cnn_forward<T: Scalar>(bev: &DenseTensor<T>, cnn: &BevCnn<T>) -> Result<DenseTensor<T>> {
    cnn.forward(bev).map(|(y, _)| y)
}

/// Configured GSA stage with its CNN weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Gsa<T = f32> {
    pub config: GsaConfig,
    pub cnn: BevCnn<T>,
}

#[derive(Clone, Debug)]
pub struct GsaCache<T> {
    input: SparseVoxelTensor<T>,
    cnn: BevCnnCache<T>,
}

impl<T: Scalar> Gsa<T> {
    pub fn new<R: Rng + ?Sized>(config: GsaConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let cnn = BevCnn::new(config.bev_channels(), config.scale_widths, config.activation, rng);
        Ok(Self { config, cnn })
    }

    pub fn out_channels(&self) -> usize {
        2 * self.config.channels
    }

    pub fn forward(&self, s: &SparseVoxelTensor<T>) -> Result<(SparseVoxelTensor<T>, GsaCache<T>)> {
        let e = self.config.extent();
        if s.extent() != e || s.channels() != self.config.channels {
            return Err(shape_err!(
                "GSA configured for {} x {} channels, got {} x {}",
                e,
                self.config.channels,
                s.extent(),
                s.channels()
            ));
        }
        let bev = dense_to_bev(&sparse_to_dense(s))?;
        let (y, cnn_cache) = self.cnn.forward(&bev)?;
        let dense = bev_to_dense(&y, e.d)?;
        let back = gather_at(&dense, e, s.batch(), s.channels(), s.coord_set().clone());
        let out = concat_features(s, &back)?;
        Ok((out, GsaCache { input: s.clone(), cnn: cnn_cache }))
    }

    /// Accumulates CNN gradients; returns the gradient w.r.t. the sparse input.
    pub fn backward(&mut self, cache: &GsaCache<T>, grad_out: &[T]) -> Result<Vec<T>> {
        let s = &cache.input;
        let c = s.channels();
        let g = s.with_features(2 * c, grad_out.to_vec())?;
        let (mut g_in, g_back) = split_features(&g, c)?;
        let g_dense = densify(&s.with_features(c, g_back)?);
        let g_bev = dense_to_bev(&g_dense)?;
        let g_bev_in = self.cnn.backward(&cache.cnn, &g_bev)?;
        let g_dense_in = bev_to_dense(&g_bev_in, s.extent().d)?;
        let g_sparse = gather_at(&g_dense_in, s.extent(), s.batch(), c, s.coord_set().clone());
        g_in.iter_mut().zip(g_sparse.features()).for_each(|(a, &b)| *a += b);
        Ok(g_in)
    }

    pub fn cast<U: Scalar>(&self) -> Gsa<U> {
        Gsa { config: self.config, cnn: self.cnn.cast() }
    }
}

impl<T: Scalar> Parameters<T> for Gsa<T> {
    fn params(&self) -> Vec<&Value<T>> {
        self.cnn.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Value<T>> {
        self.cnn.params_mut()
    }
}

pub fn gsa_forward<T: Scalar>(s: &SparseVoxelTensor<T>, gsa: &Gsa<T>) -> Result<SparseVoxelTensor<T>> {
    gsa.forward(s).map(|(y, _)| y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded;
    use crate::tensor::Coord;
    use rand::Rng;

    fn random_dense(shape: Vec<usize>, seed: u64) -> DenseTensor<f32> {
        let mut rng = seeded(seed);
        let n = shape.iter().product();
        DenseTensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn bev_channel_layout() {
        let d = random_dense(vec![2, 4, 8, 3, 5], 1);
        let bev = dense_to_bev(&d).unwrap();
        assert_eq!(bev.shape(), &[2, 32, 3, 5]);
        // channel z*C + c of batch 1 holds slice [1, c, z]
        let (c, z) = (3, 6);
        let plane = 15;
        let want = &d.data()[((4 + c) * 8 + z) * plane..((4 + c) * 8 + z + 1) * plane];
        let got = &bev.data()[(32 + z * 4 + c) * plane..(32 + z * 4 + c + 1) * plane];
        assert_eq!(want, got);
        assert_eq!(bev_to_dense(&bev, 8).unwrap(), d);
    }

    #[test]
    fn unit_height_is_a_squeeze() {
        let d = random_dense(vec![1, 3, 1, 4, 4], 2);
        let bev = dense_to_bev(&d).unwrap();
        assert_eq!(bev.shape(), &[1, 3, 4, 4]);
        assert_eq!(bev.data(), d.data());
    }

    #[test]
    fn bev_errors() {
        let d = random_dense(vec![1, 3, 4, 4], 2);
        assert!(dense_to_bev(&d).is_err());
        assert!(bev_to_dense(&d, 2).is_err());
    }

    fn center_tap(ci: usize, co: usize, k: usize, stride: usize, scale: f32) -> Conv2dLayer<f32> {
        let mut w = vec![0.0; co * ci * k * k];
        for c in 0..co.min(ci) {
            w[((c * ci + c) * k + k / 2) * k + k / 2] = scale;
        }
        Conv2dLayer::from_parts(Value::new(vec![co, ci, k, k], w).unwrap(), Value::zeros(vec![co]), stride, k / 2)
            .unwrap()
    }

    fn identity_cnn(c: usize, full_weight: f32, half_weight: f32) -> BevCnn<f32> {
        let mut fuse = vec![0.0; c * 2 * c];
        for ch in 0..c {
            fuse[ch * 2 * c + ch] = full_weight;
            fuse[ch * 2 * c + c + ch] = half_weight;
        }
        BevCnn {
            full_a: center_tap(c, c, 3, 1, 1.0),
            full_b: center_tap(c, c, 3, 1, 1.0),
            half_a: center_tap(c, c, 3, 2, 1.0),
            half_b: center_tap(c, c, 3, 1, 1.0),
            fuse: Conv2dLayer::from_parts(Value::new(vec![c, 2 * c, 1, 1], fuse).unwrap(), Value::zeros(vec![c]), 1, 0)
                .unwrap(),
            activation: Activation::Identity,
        }
    }

    #[test]
    fn identity_configuration_passes_through() {
        // constant over 2x2 blocks, so both branches see the same signal
        let base = random_dense(vec![1, 3, 3, 4], 3);
        let mut data = Vec::new();
        for c in 0..3 {
            for y in 0..6 {
                for x in 0..8 {
                    data.push(base.data()[(c * 3 + y / 2) * 4 + x / 2]);
                }
            }
        }
        let x = DenseTensor::new(vec![1, 3, 6, 8], data).unwrap();
        let cnn = identity_cnn(3, 0.5, 0.5);
        let y = bev_cnn_forward(&x, &cnn).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_input_gives_constant_bias_response() {
        let mut rng = seeded(5);
        let mut cnn = BevCnn::<f32>::new(4, [3, 5], Activation::Relu, &mut rng);
        cnn.fuse.bias.data = vec![0.5, -1.0, 2.0, 0.25];
        let y = bev_cnn_forward(&DenseTensor::zeros(vec![1, 4, 7, 5]).unwrap(), &cnn).unwrap();
        for c in 0..4 {
            assert!(y.data()[c * 35..(c + 1) * 35].iter().all(|&v| v == cnn.fuse.bias.data[c]));
        }
    }

    #[test]
    fn odd_sizes_keep_spatial_shape() {
        let mut rng = seeded(6);
        let cnn = BevCnn::<f32>::new(2, [3, 3], Activation::Relu, &mut rng);
        let y = bev_cnn_forward(&random_dense(vec![1, 2, 5, 7], 7), &cnn).unwrap();
        assert_eq!(y.shape(), &[1, 2, 5, 7]);
    }

    #[test]
    fn gsa_identity_pipeline_and_empty() {
        let cfg = GsaConfig {
            grid: [4, 6, 6],
            downsample: [1, 1, 1],
            channels: 2,
            scale_widths: [8, 8],
            activation: Activation::Identity,
        };
        let mut gsa = Gsa::<f32>::new(cfg, &mut seeded(1)).unwrap();
        gsa.cnn = identity_cnn(8, 1.0, 0.0);
        let coords = vec![Coord::new(0, 1, 2, 3), Coord::new(0, 3, 5, 0), Coord::new(0, 0, 0, 0)];
        let s = SparseVoxelTensor::new(cfg.extent(), 1, 2, coords, vec![1.0, 2.0, 3.0, 4.0, 5.0, -6.0]).unwrap();
        let out = gsa_forward(&s, &gsa).unwrap();
        assert_eq!(out.coords(), s.coords());
        for i in 0..s.len() {
            assert_eq!(&out.row(i)[..2], s.row(i));
            assert_eq!(&out.row(i)[2..], s.row(i));
        }
        let e = SparseVoxelTensor::<f32>::empty(cfg.extent(), 1, 2).unwrap();
        let out = gsa_forward(&e, &gsa).unwrap();
        assert!(out.is_empty());
        assert_eq!(out.channels(), 4);
    }

    #[test]
    fn config_validation() {
        let bad = GsaConfig {
            grid: [5, 8, 8],
            downsample: [2, 2, 2],
            channels: 4,
            scale_widths: [4, 4],
            activation: Activation::Relu,
        };
        assert!(bad.validate().is_err());
        let ok = GsaConfig { grid: [8, 8, 8], ..bad };
        assert_eq!(ok.bev_channels(), 16);
    }
}
