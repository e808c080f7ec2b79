//! Sparse 3D convolutions over [`SparseVoxelTensor`]s and the sparse
//! down-sampling block built from them.
//!
//! A convolution is executed through an [`IndexMap`] (rulebook) listing every
//! `(input row, output row, kernel offset)` contribution. The map of a strided
//! layer is kept so that an [`InverseSparseConvLayer`] can scatter features
//! back onto the strided layer's input coordinates.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::nn::Activation;
use crate::tensor::{
    concat_features, split_features, Coord, CoordSet, DenseTensor, Extent, Parameters, Scalar, SparseVoxelTensor, Value,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvMode {
    /// Output sites are exactly the input sites; stride 1, odd kernel,
    /// centered.
    Submanifold,
    /// Output wherever an active input falls in the receptive field.
    Regular,
}

/// Kernel size, stride, padding and mode of a sparse convolution. Arrays are
/// ordered `(z, y, x)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub mode: ConvMode,
}

impl ConvGeometry {
    pub fn submanifold(k: usize) -> Self {
        Self { kernel: [k; 3], stride: [1; 3], padding: [k / 2; 3], mode: ConvMode::Submanifold }
    }

    pub fn regular(k: usize, stride: usize, padding: usize) -> Self {
        Self { kernel: [k; 3], stride: [stride; 3], padding: [padding; 3], mode: ConvMode::Regular }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.iter().chain(&self.stride).any(|&v| v == 0) {
            return Err(config_err!("kernel sizes and strides must be positive: {self:?}"));
        }
        if self.mode == ConvMode::Submanifold {
            if self.stride != [1; 3] || self.kernel.iter().any(|k| k % 2 == 0) {
                return Err(config_err!("submanifold convolution needs stride 1 and odd kernels: {self:?}"));
            }
            if (0..3).any(|a| self.padding[a] != self.kernel[a] / 2) {
                return Err(config_err!("submanifold convolution is centered; padding must be kernel/2"));
            }
        }
        Ok(())
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn offset_id(&self, k: [usize; 3]) -> usize {
        (k[0] * self.kernel[1] + k[1]) * self.kernel[2] + k[2]
    }

    pub fn offset_of(&self, id: usize) -> [usize; 3] {
        let kx = id % self.kernel[2];
        let ky = (id / self.kernel[2]) % self.kernel[1];
        [id / (self.kernel[1] * self.kernel[2]), ky, kx]
    }

    pub fn output_extent(&self, input: Extent) -> Result<Extent> {
        if self.mode == ConvMode::Submanifold {
            return Ok(input);
        }
        let e = input.as_array();
        let mut out = [0; 3];
        for a in 0..3 {
            let span = e[a] + 2 * self.padding[a];
            if span < self.kernel[a] {
                return Err(shape_err!(
                    "extent {input} too small for kernel {:?} / padding {:?}",
                    self.kernel,
                    self.padding
                ));
            }
            out[a] = (span - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(Extent::from_array(out))
    }
}

/// Gather/scatter rulebook of one convolution.
///
/// Contributions are stored twice, grouped by output row (`out_*`) and by
/// input row (`in_*`), so both directions run as independent per-row
/// accumulations.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexMap {
    pub input_extent: Extent,
    pub output_extent: Extent,
    pub batch: usize,
    pub kernel_volume: usize,
    input_coords: Arc<CoordSet>,
    output_coords: Arc<CoordSet>,
    out_start: Vec<usize>,
    out_src: Vec<u32>,
    out_k: Vec<u16>,
    in_start: Vec<usize>,
    in_dst: Vec<u32>,
    in_k: Vec<u16>,
}

impl IndexMap {
    fn from_pairs(
        input: &SparseVoxelTensor<impl Scalar>,
        output_extent: Extent,
        output_coords: Arc<CoordSet>,
        kernel_volume: usize,
        mut pairs: Vec<(u32, u32, u16)>,
    ) -> Self {
        pairs.sort_unstable_by_key(|&(i, o, k)| (o, k, i));
        let n_out = output_coords.len();
        let mut out_start = vec![0usize; n_out + 1];
        for &(_, o, _) in &pairs {
            out_start[o as usize + 1] += 1;
        }
        for i in 0..n_out {
            out_start[i + 1] += out_start[i];
        }
        let out_src = pairs.iter().map(|p| p.0).collect();
        let out_k = pairs.iter().map(|p| p.2).collect();

        pairs.sort_unstable_by_key(|&(i, o, k)| (i, k, o));
        let n_in = input.len();
        let mut in_start = vec![0usize; n_in + 1];
        for &(i, _, _) in &pairs {
            in_start[i as usize + 1] += 1;
        }
        for i in 0..n_in {
            in_start[i + 1] += in_start[i];
        }
        Self {
            input_extent: input.extent(),
            output_extent,
            batch: input.batch(),
            kernel_volume,
            input_coords: input.coord_set().clone(),
            output_coords,
            out_start,
            out_src,
            out_k,
            in_start,
            in_dst: pairs.iter().map(|p| p.1).collect(),
            in_k: pairs.iter().map(|p| p.2).collect(),
        }
    }

    pub fn input_coords(&self) -> &[Coord] {
        self.input_coords.coords()
    }

    pub fn output_coords(&self) -> &[Coord] {
        self.output_coords.coords()
    }

    pub fn len(&self) -> usize {
        self.out_src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.out_src.is_empty()
    }

    /// `(input_row, output_row, kernel_offset_id)` triples, grouped by output.
    pub fn pairs(&self) -> Vec<(u32, u32, u16)> {
        let mut v = Vec::with_capacity(self.len());
        for o in 0..self.output_coords.len() {
            for j in self.out_start[o]..self.out_start[o + 1] {
                v.push((self.out_src[j], o as u32, self.out_k[j]));
            }
        }
        v
    }

    fn forward_rules(&self) -> Rules<'_> {
        Rules { start: &self.out_start, src: &self.out_src, k: &self.out_k }
    }

    fn inverse_rules(&self) -> Rules<'_> {
        Rules { start: &self.in_start, src: &self.in_dst, k: &self.in_k }
    }
}

/// CSR view: destination row `r` sums over `src[start[r]..start[r+1]]`.
struct Rules<'a> {
    start: &'a [usize],
    src: &'a [u32],
    k: &'a [u16],
}

/// Builds the rulebook of `geometry` applied to `input`.
pub fn build_index_map_for<T: Scalar>(input: &SparseVoxelTensor<T>, g: &ConvGeometry) -> Result<IndexMap> {
    g.validate()?;
    let out_extent = g.output_extent(input.extent())?;
    let kvol = g.kernel_volume();
    let coords = input.coords();
    match g.mode {
        ConvMode::Submanifold => {
            let ext = input.extent().as_array();
            let pairs: Vec<(u32, u32, u16)> = coords
                .par_iter()
                .enumerate()
                .flat_map_iter(|(o, c)| {
                    let sp = c.spatial();
                    (0..kvol).filter_map(move |k| {
                        let off = g.offset_of(k);
                        let mut n = [0u32; 3];
                        for a in 0..3 {
                            let v = sp[a] as i64 + off[a] as i64 - g.padding[a] as i64;
                            if v < 0 || v >= ext[a] as i64 {
                                return None;
                            }
                            n[a] = v as u32;
                        }
                        input.find(&Coord::new(c.b, n[0], n[1], n[2])).map(|i| (i as u32, o as u32, k as u16))
                    })
                })
                .collect();
            Ok(IndexMap::from_pairs(input, out_extent, input.coord_set().clone(), kvol, pairs))
        }
        ConvMode::Regular => {
            let oe = out_extent.as_array();
            let contribution = |c: &Coord, k: usize| -> Option<Coord> {
                let sp = c.spatial();
                let off = g.offset_of(k);
                let mut o = [0u32; 3];
                for a in 0..3 {
                    let num = sp[a] as i64 + g.padding[a] as i64 - off[a] as i64;
                    if num < 0 || num % g.stride[a] as i64 != 0 {
                        return None;
                    }
                    let v = num / g.stride[a] as i64;
                    if v >= oe[a] as i64 {
                        return None;
                    }
                    o[a] = v as u32;
                }
                Some(Coord::new(c.b, o[0], o[1], o[2]))
            };
            let out_set: BTreeSet<Coord> = coords
                .par_iter()
                .map(|c| (0..kvol).filter_map(|k| contribution(c, k)).collect::<BTreeSet<_>>())
                .reduce(BTreeSet::new, |mut a, b| {
                    a.extend(b);
                    a
                });
            let out = Arc::new(CoordSet::from_sorted(out_set.into_iter().collect()));
            let pairs = coords
                .par_iter()
                .enumerate()
                .flat_map_iter(|(i, c)| {
                    let out = &out;
                    (0..kvol).filter_map(move |k| {
                        contribution(c, k).map(|oc| (i as u32, out.find(&oc).unwrap() as u32, k as u16))
                    })
                })
                .collect();
            Ok(IndexMap::from_pairs(input, out_extent, out, kvol, pairs))
        }
    }
}

/// `out[r] = bias + sum_{(s, k) in rules[r]} W_k x[s]`, rows in parallel.
/// `wt` is laid out `[k][c_out][c_in]`.
fn apply_rules<T: Scalar>(
    x: &[T],
    ci: usize,
    co: usize,
    n_rows: usize,
    wt: &[T],
    bias: &[T],
    rules: &Rules<'_>,
) -> Vec<T> {
    let mut out = vec![T::zero(); n_rows * co];
    out.par_chunks_mut(co).enumerate().for_each(|(r, row)| {
        row.copy_from_slice(bias);
        for j in rules.start[r]..rules.start[r + 1] {
            let xs = &x[rules.src[j] as usize * ci..(rules.src[j] as usize + 1) * ci];
            let wk = &wt[rules.k[j] as usize * co * ci..(rules.k[j] as usize + 1) * co * ci];
            for (o, acc) in row.iter_mut().enumerate() {
                let w = &wk[o * ci..(o + 1) * ci];
                let mut s = T::zero();
                for (a, b) in w.iter().zip(xs) {
                    s += *a * *b;
                }
                *acc += s;
            }
        }
    });
    out
}

/// Gradients of [`apply_rules`]. Returns `(grad_x, grad_weight, grad_bias)`
/// with the weight gradient in `[c_out][c_in][k]` layout.
#[allow(clippy::too_many_arguments)]
fn rules_backward<T: Scalar>(
    x: &[T],
    n_src: usize,
    ci: usize,
    co: usize,
    kvol: usize,
    weight: &[T],
    grad_out: &[T],
    rules: &Rules<'_>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n_rows = rules.start.len() - 1;
    let mut gx = vec![T::zero(); n_src * ci];
    let mut gw = vec![T::zero(); co * ci * kvol];
    let mut gb = vec![T::zero(); co];
    for r in 0..n_rows {
        let g = &grad_out[r * co..(r + 1) * co];
        for (o, &v) in g.iter().enumerate() {
            gb[o] += v;
        }
        for j in rules.start[r]..rules.start[r + 1] {
            let s = rules.src[j] as usize;
            let k = rules.k[j] as usize;
            let xs = &x[s * ci..(s + 1) * ci];
            for (o, &gv) in g.iter().enumerate() {
                if gv == T::zero() {
                    continue;
                }
                for i in 0..ci {
                    let widx = (o * ci + i) * kvol + k;
                    gw[widx] += gv * xs[i];
                    gx[s * ci + i] += gv * weight[widx];
                }
            }
        }
    }
    (gx, gw, gb)
}

/// `[c_out][c_in][k]` -> `[k][c_out][c_in]`.
fn kernel_major<T: Scalar>(w: &[T], co: usize, ci: usize, kvol: usize) -> Vec<T> {
    let mut t = vec![T::zero(); w.len()];
    for o in 0..co {
        for i in 0..ci {
            for k in 0..kvol {
                t[(k * co + o) * ci + i] = w[(o * ci + i) * kvol + k];
            }
        }
    }
    t
}

fn init_kernel<T: Scalar, R: Rng + ?Sized>(ci: usize, co: usize, g: &ConvGeometry, rng: &mut R) -> Value<T> {
    let fan_in = ci * g.kernel_volume();
    let mut shape = vec![co, ci];
    shape.extend_from_slice(&g.kernel);
    Value::uniform(shape, (6.0 / fan_in as f64).sqrt(), rng)
}

fn check_kernel<T: Scalar>(weight: &Value<T>, bias: &Value<T>, kernel: [usize; 3]) -> Result<()> {
    let s = &weight.shape;
    if s.len() != 5 || s[2..] != kernel || bias.shape != [s[0]] {
        return Err(shape_err!("kernel {:?} / bias {:?} do not match kernel size {kernel:?}", s, bias.shape));
    }
    Ok(())
}

/// Learned sparse convolution, kernel shaped `C_out x C_in x k_z x k_y x k_x`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseConvLayer<T = f32> {
    pub weight: Value<T>,
    pub bias: Value<T>,
    pub geometry: ConvGeometry,
}

impl<T: Scalar> SparseConvLayer<T> {
    pub fn new<R: Rng + ?Sized>(ci: usize, co: usize, geometry: ConvGeometry, rng: &mut R) -> Result<Self> {
        geometry.validate()?;
        if ci == 0 || co == 0 {
            return Err(config_err!("channel counts must be positive"));
        }
        Ok(Self { weight: init_kernel(ci, co, &geometry, rng), bias: Value::zeros(vec![co]), geometry })
    }

    pub fn from_parts(weight: Value<T>, bias: Value<T>, geometry: ConvGeometry) -> Result<Self> {
        geometry.validate()?;
        check_kernel(&weight, &bias, geometry.kernel)?;
        Ok(Self { weight, bias, geometry })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn forward(&self, x: &SparseVoxelTensor<T>) -> Result<(SparseVoxelTensor<T>, IndexMap)> {
        sparse_conv_forward(x, self)
    }

    /// Runs on a precomputed rulebook.
    pub fn forward_with_map(&self, x: &SparseVoxelTensor<T>, map: &IndexMap) -> Result<SparseVoxelTensor<T>> {
        if x.channels() != self.in_channels() {
            return Err(shape_err!("layer expects {} channels, input has {}", self.in_channels(), x.channels()));
        }
        let (ci, co, kvol) = (self.in_channels(), self.out_channels(), self.geometry.kernel_volume());
        let wt = kernel_major(&self.weight.data, co, ci, kvol);
        let n_out = map.output_coords.len();
        let feats = apply_rules(x.features(), ci, co, n_out, &wt, &self.bias.data, &map.forward_rules());
        Ok(SparseVoxelTensor::from_parts(map.output_extent, map.batch, co, map.output_coords.clone(), feats))
    }

    /// Accumulates kernel and bias gradients; returns the input gradient.
    pub fn backward(&mut self, x: &SparseVoxelTensor<T>, map: &IndexMap, grad_out: &[T]) -> Result<Vec<T>> {
        let (gx, gw, gb) = sparse_conv_backward(grad_out, map, x, self)?;
        self.weight.accumulate_grad(&gw);
        self.bias.accumulate_grad(&gb);
        Ok(gx)
    }

    pub fn cast<U: Scalar>(&self) -> SparseConvLayer<U> {
        SparseConvLayer { weight: self.weight.cast(), bias: self.bias.cast(), geometry: self.geometry }
    }
}

impl<T: Scalar> Parameters<T> for SparseConvLayer<T> {
    fn params(&self) -> Vec<&Value<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Value<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

pub fn build_index_map<T: Scalar>(x: &SparseVoxelTensor<T>, layer: &SparseConvLayer<T>) -> Result<IndexMap> {
    build_index_map_for(x, &layer.geometry)
}

pub fn sparse_conv_forward<T: Scalar>(
    x: &SparseVoxelTensor<T>,
    layer: &SparseConvLayer<T>,
) -> Result<(SparseVoxelTensor<T>, IndexMap)> {
    if x.channels() != layer.in_channels() {
        return Err(shape_err!("layer expects {} channels, input has {}", layer.in_channels(), x.channels()));
    }
    let map = build_index_map(x, layer)?;
    let y = layer.forward_with_map(x, &map)?;
    Ok((y, map))
}

/// Returns `(grad_in, grad_kernel, grad_bias)` without touching the layer.
pub fn sparse_conv_backward<T: Scalar>(
    grad_out: &[T],
    map: &IndexMap,
    x: &SparseVoxelTensor<T>,
    layer: &SparseConvLayer<T>,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let (ci, co, kvol) = (layer.in_channels(), layer.out_channels(), layer.geometry.kernel_volume());
    if grad_out.len() != map.output_coords.len() * co || x.len() != map.input_coords.len() || x.channels() != ci {
        return Err(shape_err!("gradient or input does not match the saved index map"));
    }
    Ok(rules_backward(x.features(), x.len(), ci, co, kvol, &layer.weight.data, grad_out, &map.forward_rules()))
}

/// Scatters features of a strided layer's output back onto that layer's input
/// coordinates through its recorded [`IndexMap`], with its own kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct InverseSparseConvLayer<T = f32> {
    pub weight: Value<T>,
    pub bias: Value<T>,
    pub kernel: [usize; 3],
    pub paired_map: Option<IndexMap>,
}

impl<T: Scalar> InverseSparseConvLayer<T> {
    pub fn new<R: Rng + ?Sized>(ci: usize, co: usize, kernel: [usize; 3], rng: &mut R) -> Result<Self> {
        if ci == 0 || co == 0 || kernel.contains(&0) {
            return Err(config_err!("inverse layer needs positive channels and kernel sizes"));
        }
        let g = ConvGeometry { kernel, stride: [1; 3], padding: [0; 3], mode: ConvMode::Regular };
        Ok(Self { weight: init_kernel(ci, co, &g, rng), bias: Value::zeros(vec![co]), kernel, paired_map: None })
    }

    pub fn from_parts(weight: Value<T>, bias: Value<T>, kernel: [usize; 3]) -> Result<Self> {
        check_kernel(&weight, &bias, kernel)?;
        Ok(Self { weight, bias, kernel, paired_map: None })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape[0]
    }

    /// Records the rulebook of the strided layer this layer inverts.
    pub fn pair(&mut self, map: IndexMap) {
        self.paired_map = Some(map);
    }

    pub fn forward(&self, x: &SparseVoxelTensor<T>) -> Result<SparseVoxelTensor<T>> {
        let map = self.paired_map.as_ref().ok_or_else(|| Error::State("inverse layer is not paired".into()))?;
        self.forward_with_map(x, map)
    }

    pub fn forward_with_map(&self, x: &SparseVoxelTensor<T>, map: &IndexMap) -> Result<SparseVoxelTensor<T>> {
        self.check(x, map)?;
        let (ci, co) = (self.in_channels(), self.out_channels());
        let kvol = map.kernel_volume;
        let wt = kernel_major(&self.weight.data, co, ci, kvol);
        let n = map.input_coords.len();
        let feats = apply_rules(x.features(), ci, co, n, &wt, &self.bias.data, &map.inverse_rules());
        Ok(SparseVoxelTensor::from_parts(map.input_extent, map.batch, co, map.input_coords.clone(), feats))
    }

    fn check(&self, x: &SparseVoxelTensor<T>, map: &IndexMap) -> Result<()> {
        if map.kernel_volume != self.kernel.iter().product::<usize>() {
            return Err(shape_err!("paired map kernel volume {} != {:?}", map.kernel_volume, self.kernel));
        }
        if x.extent() != map.output_extent || x.coords() != map.output_coords() {
            return Err(Error::Alignment("input is not on the paired layer's output coordinates".into()));
        }
        if x.channels() != self.in_channels() {
            return Err(shape_err!(
                "inverse layer expects {} channels, input has {}",
                self.in_channels(),
                x.channels()
            ));
        }
        Ok(())
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &SparseVoxelTensor<T>, map: &IndexMap, grad_out: &[T]) -> Result<Vec<T>> {
        self.check(x, map)?;
        let (ci, co) = (self.in_channels(), self.out_channels());
        if grad_out.len() != map.input_coords.len() * co {
            return Err(shape_err!("gradient does not match the restored coordinate set"));
        }
        let (gx, gw, gb) = rules_backward(
            x.features(),
            x.len(),
            ci,
            co,
            map.kernel_volume,
            &self.weight.data,
            grad_out,
            &map.inverse_rules(),
        );
        self.weight.accumulate_grad(&gw);
        self.bias.accumulate_grad(&gb);
        Ok(gx)
    }

    pub fn cast<U: Scalar>(&self) -> InverseSparseConvLayer<U> {
        InverseSparseConvLayer {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            kernel: self.kernel,
            paired_map: self.paired_map.clone(),
        }
    }
}

impl<T: Scalar> Parameters<T> for InverseSparseConvLayer<T> {
    fn params(&self) -> Vec<&Value<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Value<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

pub fn inverse_conv_forward<T: Scalar>(
    x: &SparseVoxelTensor<T>,
    layer: &InverseSparseConvLayer<T>,
) -> Result<SparseVoxelTensor<T>> {
    layer.forward(x)
}

// ---------------------------------------------------------------------------
// Sparse down-sampling block
// ---------------------------------------------------------------------------

/// Channel widths of an [`SdsBlock`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdsConfig {
    pub in_channels: usize,
    /// Width after the first stride-2 layer and the two stride-1 layers.
    pub mid_channels: usize,
    /// Width produced by the inverse layer (concatenated with the raw input).
    pub restore_channels: usize,
    /// Width of the stride-1 layer after the concatenation.
    pub post_channels: usize,
    pub out_channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default)]
    pub activation: Activation,
}

fn default_kernel() -> usize {
    3
}

/// down1 (stride 2) -> mid1 -> mid2 -> inverse(down1) -> concat with input ->
/// post -> down2 (stride 2). The activation follows every layer except down2.
#[derive(Clone, Debug, PartialEq)]
pub struct SdsBlock<T = f32> {
    pub down1: SparseConvLayer<T>,
    pub mid1: SparseConvLayer<T>,
    pub mid2: SparseConvLayer<T>,
    pub inv: InverseSparseConvLayer<T>,
    pub post: SparseConvLayer<T>,
    pub down2: SparseConvLayer<T>,
    pub activation: Activation,
}

#[derive(Clone, Debug)]
struct Stage<T> {
    input: SparseVoxelTensor<T>,
    map: IndexMap,
    pre: Vec<T>,
}

/// Saved activations for [`SdsBlock::backward`].
#[derive(Clone, Debug)]
pub struct SdsCache<T> {
    down1: Stage<T>,
    mid1: Stage<T>,
    mid2: Stage<T>,
    inv_input: SparseVoxelTensor<T>,
    inv_pre: Vec<T>,
    post: Stage<T>,
    down2: Stage<T>,
    in_channels: usize,
}

impl<T: Scalar> SdsBlock<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &SdsConfig, rng: &mut R) -> Result<Self> {
        let k = cfg.kernel;
        if k.is_multiple_of(2) {
            return Err(config_err!("SDS kernel size must be odd, got {k}"));
        }
        let down = ConvGeometry::regular(k, 2, k / 2);
        let sub = ConvGeometry::submanifold(k);
        Ok(Self {
            down1: SparseConvLayer::new(cfg.in_channels, cfg.mid_channels, down, rng)?,
            mid1: SparseConvLayer::new(cfg.mid_channels, cfg.mid_channels, sub, rng)?,
            mid2: SparseConvLayer::new(cfg.mid_channels, cfg.mid_channels, sub, rng)?,
            inv: InverseSparseConvLayer::new(cfg.mid_channels, cfg.restore_channels, [k; 3], rng)?,
            post: SparseConvLayer::new(cfg.in_channels + cfg.restore_channels, cfg.post_channels, sub, rng)?,
            down2: SparseConvLayer::new(cfg.post_channels, cfg.out_channels, down, rng)?,
            activation: cfg.activation,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let chain = [
            (self.down1.out_channels(), self.mid1.in_channels()),
            (self.mid1.out_channels(), self.mid2.in_channels()),
            (self.mid2.out_channels(), self.inv.in_channels()),
            (self.down1.in_channels() + self.inv.out_channels(), self.post.in_channels()),
            (self.post.out_channels(), self.down2.in_channels()),
        ];
        if chain.iter().any(|(a, b)| a != b) {
            return Err(shape_err!("SDS channel chain does not line up: {chain:?}"));
        }
        if self.inv.kernel != self.down1.geometry.kernel {
            return Err(shape_err!("inverse kernel must match down1's kernel"));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.down1.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.down2.out_channels()
    }

    fn stage(
        &self,
        layer: &SparseConvLayer<T>,
        x: SparseVoxelTensor<T>,
        act: bool,
    ) -> Result<(SparseVoxelTensor<T>, Stage<T>)> {
        let (y, map) = layer.forward(&x)?;
        let pre = y.features().to_vec();
        let y = if act { self.activate(y)? } else { y };
        Ok((y, Stage { input: x, map, pre }))
    }

    fn activate(&self, y: SparseVoxelTensor<T>) -> Result<SparseVoxelTensor<T>> {
        let c = y.channels();
        let mut f = y.features().to_vec();
        self.activation.apply_slice(&mut f);
        y.with_features(c, f)
    }

    pub fn forward(&self, x: &SparseVoxelTensor<T>) -> Result<(SparseVoxelTensor<T>, SdsCache<T>)> {
        self.validate()?;
        let (h1, down1) = self.stage(&self.down1, x.clone(), true)?;
        let (h2, mid1) = self.stage(&self.mid1, h1, true)?;
        let (h3, mid2) = self.stage(&self.mid2, h2, true)?;
        let r = self.inv.forward_with_map(&h3, &down1.map)?;
        let inv_pre = r.features().to_vec();
        let r = self.activate(r)?;
        let cat = concat_features(x, &r)?;
        let (h5, post) = self.stage(&self.post, cat, true)?;
        let (out, down2) = self.stage(&self.down2, h5, false)?;
        let cache = SdsCache { down1, mid1, mid2, inv_input: h3, inv_pre, post, down2, in_channels: x.channels() };
        Ok((out, cache))
    }

    /// Accumulates gradients of all six layers; returns the input gradient.
    pub fn backward(&mut self, cache: &SdsCache<T>, grad_out: &[T]) -> Result<Vec<T>> {
        let act = self.activation;
        let mut g = self.down2.backward(&cache.down2.input, &cache.down2.map, grad_out)?;
        act.backprop(&cache.post.pre, &mut g);
        let g_cat = self.post.backward(&cache.post.input, &cache.post.map, &g)?;
        let cat = cache.post.input.with_features(cache.post.input.channels(), g_cat)?;
        let (mut g_in, mut g_r) = split_features(&cat, cache.in_channels)?;
        act.backprop(&cache.inv_pre, &mut g_r);
        let mut g = self.inv.backward(&cache.inv_input, &cache.down1.map, &g_r)?;
        act.backprop(&cache.mid2.pre, &mut g);
        let mut g = self.mid2.backward(&cache.mid2.input, &cache.mid2.map, &g)?;
        act.backprop(&cache.mid1.pre, &mut g);
        let mut g = self.mid1.backward(&cache.mid1.input, &cache.mid1.map, &g)?;
        act.backprop(&cache.down1.pre, &mut g);
        let g = self.down1.backward(&cache.down1.input, &cache.down1.map, &g)?;
        g_in.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
        Ok(g_in)
    }

    pub fn cast<U: Scalar>(&self) -> SdsBlock<U> {
        SdsBlock {
            down1: self.down1.cast(),
            mid1: self.mid1.cast(),
            mid2: self.mid2.cast(),
            inv: self.inv.cast(),
            post: self.post.cast(),
            down2: self.down2.cast(),
            activation: self.activation,
        }
    }
}

impl<T: Scalar> Parameters<T> for SdsBlock<T> {
    fn params(&self) -> Vec<&Value<T>> {
        let mut v = self.down1.params();
        v.extend(self.mid1.params());
        v.extend(self.mid2.params());
        v.extend(self.inv.params());
        v.extend(self.post.params());
        v.extend(self.down2.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Value<T>> {
        let mut v = self.down1.params_mut();
        v.extend(self.mid1.params_mut());
        v.extend(self.mid2.params_mut());
        v.extend(self.inv.params_mut());
        v.extend(self.post.params_mut());
        v.extend(self.down2.params_mut());
        v
    }
}

pub fn sds_forward<T: Scalar>(x: &SparseVoxelTensor<T>, block: &SdsBlock<T>) -> Result<SparseVoxelTensor<T>> {
    block.forward(x).map(|(y, _)| y)
}

/// Plain dense 3D convolution over a `(B, C, D, H, W)` tensor; the timing
/// baseline for `bench`.
pub fn dense_conv3d<T: Scalar>(
    x: &DenseTensor<T>,
    weight: &[T],
    bias: &[T],
    co: usize,
    kernel: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
) -> Result<DenseTensor<T>> {
    let [b, ci, d, h, w] = match *x.shape() {
        [b, c, d, h, w] => [b, c, d, h, w],
        _ => return Err(shape_err!("expected a 5D input")),
    };
    let geo = ConvGeometry { kernel, stride, padding, mode: ConvMode::Regular };
    let oe = geo.output_extent(Extent::new(d, h, w))?;
    let (od, oh, ow) = (oe.d, oe.h, oe.w);
    let kvol = geo.kernel_volume();
    if weight.len() != co * ci * kvol || bias.len() != co {
        return Err(shape_err!("kernel does not match {co}x{ci}x{kernel:?}"));
    }
    let xs = x.data();
    let mut out = vec![T::zero(); b * co * od * oh * ow];
    out.par_chunks_mut(od * oh * ow).enumerate().for_each(|(bo, plane)| {
        let (bb, o) = (bo / co, bo % co);
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = bias[o];
                    for i in 0..ci {
                        let base = (bb * ci + i) * d * h * w;
                        for kz in 0..kernel[0] {
                            let iz = (z * stride[0] + kz) as i64 - padding[0] as i64;
                            if iz < 0 || iz >= d as i64 {
                                continue;
                            }
                            for ky in 0..kernel[1] {
                                let iy = (y * stride[1] + ky) as i64 - padding[1] as i64;
                                if iy < 0 || iy >= h as i64 {
                                    continue;
                                }
                                let row = base + (iz as usize * h + iy as usize) * w;
                                let wrow = ((o * ci + i) * kernel[0] + kz) * kernel[1] + ky;
                                for kx in 0..kernel[2] {
                                    let ix = (xx * stride[2] + kx) as i64 - padding[2] as i64;
                                    if ix < 0 || ix >= w as i64 {
                                        continue;
                                    }
                                    acc += weight[wrow * kernel[2] + kx] * xs[row + ix as usize];
                                }
                            }
                        }
                    }
                    plane[(z * oh + y) * ow + xx] = acc;
                }
            }
        }
    });
    DenseTensor::new(vec![b, co, od, oh, ow], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded;

    fn single(c: Coord, e: Extent, f: Vec<f64>) -> SparseVoxelTensor<f64> {
        let ch = f.len();
        SparseVoxelTensor::new(e, 1, ch, vec![c], f).unwrap()
    }

    #[test]
    fn submanifold_single_voxel_center_tap_only() {
        let x = single(Coord::new(0, 2, 2, 2), Extent::new(5, 5, 5), vec![1.0]);
        let map = build_index_map_for(&x, &ConvGeometry::submanifold(3)).unwrap();
        assert_eq!(map.output_coords(), x.coords());
        assert_eq!(map.pairs(), vec![(0, 0, 13)]);
    }

    #[test]
    fn regular_single_voxel_matches_enumeration() {
        let e = Extent::new(9, 9, 9);
        let x = single(Coord::new(0, 4, 4, 4), e, vec![1.0]);
        let g = ConvGeometry::regular(3, 2, 1);
        let map = build_index_map_for(&x, &g).unwrap();
        let oe = g.output_extent(e).unwrap();
        // an output site is produced iff its receptive field covers (4,4,4)
        let mut want = Vec::new();
        for z in 0..oe.d {
            for y in 0..oe.h {
                for xx in 0..oe.w {
                    let covers = [z, y, xx].iter().all(|&o| {
                        let lo = (o * 2) as i64 - 1;
                        (lo..lo + 3).contains(&4)
                    });
                    if covers {
                        want.push(Coord::new(0, z as u32, y as u32, xx as u32));
                    }
                }
            }
        }
        assert_eq!(map.output_coords(), &want[..]);
        assert_eq!(map.len(), want.len());
    }

    #[test]
    fn empty_input_gives_empty_map() {
        let x = SparseVoxelTensor::<f32>::empty(Extent::new(4, 4, 4), 1, 2).unwrap();
        for g in [ConvGeometry::submanifold(3), ConvGeometry::regular(3, 2, 1)] {
            let map = build_index_map_for(&x, &g).unwrap();
            assert!(map.is_empty());
            assert!(map.output_coords().is_empty());
        }
    }

    #[test]
    fn pointwise_and_identity_kernels() {
        let x = single(Coord::new(0, 1, 1, 1), Extent::new(3, 3, 3), vec![3.0]);
        let l = SparseConvLayer::from_parts(
            Value::new(vec![1, 1, 1, 1, 1], vec![2.0]).unwrap(),
            Value::zeros(vec![1]),
            ConvGeometry::submanifold(1),
        )
        .unwrap();
        assert_eq!(l.forward(&x).unwrap().0.features(), &[6.0]);

        let mut rng = seeded(1);
        let coords = vec![Coord::new(0, 0, 0, 0), Coord::new(0, 0, 0, 1), Coord::new(0, 1, 2, 1)];
        let x =
            SparseVoxelTensor::new(Extent::new(3, 3, 3), 1, 2, coords, (0..6).map(|_| rng.random::<f64>()).collect())
                .unwrap();
        let mut w = vec![0.0; 2 * 2 * 27];
        for c in 0..2 {
            w[(c * 2 + c) * 27 + 13] = 1.0;
        }
        let l = SparseConvLayer::from_parts(
            Value::new(vec![2, 2, 3, 3, 3], w).unwrap(),
            Value::zeros(vec![2]),
            ConvGeometry::submanifold(3),
        )
        .unwrap();
        assert_eq!(l.forward(&x).unwrap().0, x);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = single(Coord::new(0, 0, 0, 0), Extent::new(2, 2, 2), vec![1.0, 2.0]);
        let l = SparseConvLayer::<f64>::new(3, 1, ConvGeometry::submanifold(3), &mut seeded(0)).unwrap();
        assert!(matches!(l.forward(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn submanifold_rejects_stride() {
        let g = ConvGeometry { kernel: [3; 3], stride: [2; 3], padding: [1; 3], mode: ConvMode::Submanifold };
        assert!(g.validate().is_err());
    }

    #[test]
    fn inverse_restores_single_coordinate_and_zero_kernel() {
        let mut rng = seeded(3);
        let x = single(Coord::new(0, 3, 1, 2), Extent::new(8, 8, 8), vec![1.5, -2.0]);
        let down = SparseConvLayer::<f64>::new(2, 4, ConvGeometry::regular(3, 2, 1), &mut rng).unwrap();
        let (y, map) = down.forward(&x).unwrap();
        let mut inv = InverseSparseConvLayer::<f64>::new(4, 3, [3; 3], &mut rng).unwrap();
        assert!(matches!(inv.forward(&y), Err(Error::State(_))));
        inv.pair(map);
        let r = inv.forward(&y).unwrap();
        assert_eq!(r.coords(), x.coords());
        inv.weight.data.iter_mut().for_each(|v| *v = 0.0);
        assert!(inv.forward(&y).unwrap().features().iter().all(|&v| v == 0.0));
        assert!(matches!(inv.forward(&x), Err(Error::Alignment(_))));
    }

    #[test]
    fn single_pair_kernel_gradient_is_outer_product() {
        let x = single(Coord::new(0, 0, 0, 0), Extent::new(1, 1, 1), vec![2.0, 3.0]);
        let l = SparseConvLayer::<f64>::new(2, 2, ConvGeometry::submanifold(1), &mut seeded(8)).unwrap();
        let (_, map) = l.forward(&x).unwrap();
        assert_eq!(map.len(), 1);
        let (gx, gw, gb) = sparse_conv_backward(&[5.0, -1.0], &map, &x, &l).unwrap();
        assert_eq!(gw, vec![10.0, 15.0, -2.0, -3.0]);
        assert_eq!(gb, vec![5.0, -1.0]);
        assert_eq!(gx.len(), 2);
        let (gx, gw, gb) = sparse_conv_backward(&[0.0, 0.0], &map, &x, &l).unwrap();
        assert!(gx.iter().chain(&gw).chain(&gb).all(|&v| v == 0.0));
    }

    #[test]
    fn sds_extent_and_empty() {
        let cfg = SdsConfig {
            in_channels: 2,
            mid_channels: 3,
            restore_channels: 2,
            post_channels: 4,
            out_channels: 5,
            kernel: 3,
            activation: Activation::Relu,
        };
        let block = SdsBlock::<f32>::new(&cfg, &mut seeded(4)).unwrap();
        let x =
            SparseVoxelTensor::new(Extent::new(8, 8, 8), 1, 2, vec![Coord::new(0, 5, 2, 7)], vec![1.0, 1.0]).unwrap();
        let y = sds_forward(&x, &block).unwrap();
        assert_eq!(y.extent(), Extent::new(4, 4, 4));
        assert_eq!(y.channels(), 5);
        let e = SparseVoxelTensor::<f32>::empty(Extent::new(8, 8, 8), 1, 2).unwrap();
        assert!(sds_forward(&e, &block).unwrap().is_empty());
    }
}
