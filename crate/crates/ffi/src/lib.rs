//! C interface to `effiperc-core`.
//!
//! Objects cross the boundary as opaque handles created by `ep_*_new` (or
//! `ep_voxelize`, `ep_sparse_conv_forward`) and released by the matching
//! `ep_*_free`. Every fallible function returns an [`EpStatus`]; on failure
//! the message is available from [`ep_last_error_message`] on the same
//! thread until the next failing call. Panics are caught and reported as
//! [`EpStatus::Panic`].
//!
//! Coordinates are passed as `uint32_t` quadruples `(b, z, y, x)`; features
//! are row-major `(rows, channels)` `float` arrays.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::slice;

use effiperc_core::effioptim::{dequantize_block, quantize_block, OptimConfig, Optimizer, OptimizerKind};
use effiperc_core::extract::{voxelize, PointCloud, VoxelBatch, VoxelConfig};
use effiperc_core::nn::seeded;
use effiperc_core::sparse_conv::{sparse_conv_forward, ConvGeometry, SparseConvLayer};
use effiperc_core::{Coord, Error, Extent, SparseVoxelTensor, Value};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EpStatus {
    Ok = 0,
    NullPointer = 1,
    Range = 2,
    Alignment = 3,
    Shape = 4,
    Config = 5,
    Numeric = 6,
    State = 7,
    Format = 8,
    Io = 9,
    /// The caller's buffer is too small; the required length was written.
    BufferTooSmall = 10,
    Panic = 11,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EpOptimizerKind {
    Fp32 = 0,
    EightBit = 1,
}

/// Voxel grid. Axis arrays are ordered `(x, y, z)`.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct EpVoxelConfig {
    pub range_min: [f64; 3],
    pub range_max: [f64; 3],
    pub voxel_size: [f64; 3],
    pub max_points: usize,
    pub seed: u64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct EpVoxelStats {
    pub total: usize,
    pub retained: usize,
    pub dropped: usize,
    pub out_of_range: usize,
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct EpOptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub block_size: usize,
}

/// Non-empty voxels of one point cloud.
pub struct EpVoxelBatch(VoxelBatch);

/// Sparse `float` tensor over a `(D, H, W)` grid.
pub struct EpSparseTensor(SparseVoxelTensor<f32>);

pub struct EpSparseConv(SparseConvLayer<f32>);

pub struct EpOptimizer {
    inner: Optimizer,
    sizes: Vec<usize>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(e: &Error) -> EpStatus {
    match e {
        Error::Range(_) => EpStatus::Range,
        Error::Alignment(_) => EpStatus::Alignment,
        Error::Shape(_) => EpStatus::Shape,
        Error::Config(_) => EpStatus::Config,
        Error::Numeric(_) => EpStatus::Numeric,
        Error::State(_) => EpStatus::State,
        Error::Format(_) => EpStatus::Format,
        Error::Io(_) => EpStatus::Io,
    }
}

struct Fail(EpStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

type FfiResult<T = ()> = Result<T, Fail>;

fn null(what: &str) -> Fail {
    Fail(EpStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> FfiResult) -> EpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EpStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            EpStatus::Panic
        }
    }
}

unsafe fn input<'a, T>(p: *const T, n: usize, what: &str) -> FfiResult<&'a [T]> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn output<'a, T>(p: *mut T, n: usize, what: &str) -> FfiResult<&'a mut [T]> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, n))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> FfiResult<&'a T> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn handle_mut<'a, T>(p: *mut T, what: &str) -> FfiResult<&'a mut T> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> FfiResult {
    if out.is_null() {
        return Err(null("output handle pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn check_capacity(cap: usize, need: usize, what: &str) -> FfiResult {
    if cap < need {
        return Err(Fail(EpStatus::BufferTooSmall, format!("{what} needs {need} elements, buffer holds {cap}")));
    }
    Ok(())
}

fn coords_to_u32(coords: &[Coord], out: &mut [u32]) {
    for (c, o) in coords.iter().zip(out.chunks_exact_mut(4)) {
        o.copy_from_slice(&[c.b, c.z, c.y, c.x]);
    }
}

/// Message of the last failing call on this thread; never null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ep_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a NUL-terminated static string.
#[no_mangle]
pub extern "C" fn ep_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// The KITTI detection grid with 0.16 m voxels.
#[no_mangle]
pub extern "C" fn ep_voxel_config_kitti() -> EpVoxelConfig {
    let v = VoxelConfig::kitti();
    EpVoxelConfig {
        range_min: v.range_min,
        range_max: v.range_max,
        voxel_size: v.voxel_size,
        max_points: v.max_points,
        seed: v.seed,
    }
}

/// Voxelizes `n_points` records of four floats `(x, y, z, intensity)`.
///
/// # Safety
/// `xyzi` must point to `4 * n_points` floats; `config` and `out` must be
/// valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ep_voxelize(
    xyzi: *const f32,
    n_points: usize,
    config: *const EpVoxelConfig,
    out: *mut *mut EpVoxelBatch,
) -> EpStatus {
    guard(|| {
        let raw = input(xyzi, 4 * n_points, "xyzi")?;
        let c = handle(config, "config")?;
        let cfg = VoxelConfig {
            range_min: c.range_min,
            range_max: c.range_max,
            voxel_size: c.voxel_size,
            max_points: c.max_points,
            seed: c.seed,
        };
        let points = raw.chunks_exact(4).map(|r| [r[0], r[1], r[2]]).collect();
        let intensity = raw.chunks_exact(4).map(|r| r[3]).collect();
        let pc = PointCloud::new(points, Some(intensity))?;
        put(out, EpVoxelBatch(voxelize(&pc, &cfg)?))
    })
}

/// Number of non-empty voxels; 0 for a null handle.
///
/// # Safety
/// `vb` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ep_voxel_batch_len(vb: *const EpVoxelBatch) -> usize {
    vb.as_ref().map_or(0, |v| v.0.len())
}

/// # Safety
/// `vb` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ep_voxel_batch_stats(vb: *const EpVoxelBatch, out: *mut EpVoxelStats) -> EpStatus {
    guard(|| {
        let s = handle(vb, "voxel batch")?.0.stats;
        *handle_mut(out, "out")? =
            EpVoxelStats { total: s.total, retained: s.retained, dropped: s.dropped, out_of_range: s.out_of_range };
        Ok(())
    })
}

/// Writes `4 * len` coordinates `(b, z, y, x)`.
///
/// # Safety
/// `vb` must be a live handle and `out` must hold `capacity` elements.
#[no_mangle]
pub unsafe extern "C" fn ep_voxel_batch_coords(vb: *const EpVoxelBatch, out: *mut u32, capacity: usize) -> EpStatus {
    guard(|| {
        let v = &handle(vb, "voxel batch")?.0;
        check_capacity(capacity, 4 * v.len(), "coordinates")?;
        coords_to_u32(&v.voxel_coords, output(out, 4 * v.len(), "out")?);
        Ok(())
    })
}

/// Writes the retained point count of every voxel.
///
/// # Safety
/// `vb` must be a live handle and `out` must hold `capacity` elements.
#[no_mangle]
pub unsafe extern "C" fn ep_voxel_batch_point_counts(
    vb: *const EpVoxelBatch,
    out: *mut usize,
    capacity: usize,
) -> EpStatus {
    guard(|| {
        let v = &handle(vb, "voxel batch")?.0;
        check_capacity(capacity, v.len(), "point counts")?;
        let dst = output(out, v.len(), "out")?;
        for (d, w) in dst.iter_mut().zip(v.offsets.windows(2)) {
            *d = w[1] - w[0];
        }
        Ok(())
    })
}

/// # Safety
/// `vb` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ep_voxel_batch_free(vb: *mut EpVoxelBatch) {
    if !vb.is_null() {
        drop(Box::from_raw(vb));
    }
}

/// Builds a tensor from `n` coordinates and `n * channels` features. Rows
/// are stored in canonical `(b, z, y, x)` order, which may differ from the
/// input order.
///
/// # Safety
/// `coords` must hold `4 * n` values, `features` `n * channels` values.
#[no_mangle]
pub unsafe extern "C" fn ep_sparse_tensor_new(
    depth: usize,
    height: usize,
    width: usize,
    batch: usize,
    channels: usize,
    coords: *const u32,
    n: usize,
    features: *const f32,
    out: *mut *mut EpSparseTensor,
) -> EpStatus {
    guard(|| {
        let raw = input(coords, 4 * n, "coords")?;
        let feats = input(features, n * channels, "features")?;
        let cs = raw.chunks_exact(4).map(|c| Coord::new(c[0], c[1], c[2], c[3])).collect();
        let t = SparseVoxelTensor::new(Extent::new(depth, height, width), batch, channels, cs, feats.to_vec())?;
        put(out, EpSparseTensor(t))
    })
}

/// Number of active sites; 0 for a null handle.
///
/// # Safety
/// `t` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ep_sparse_tensor_len(t: *const EpSparseTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.len())
}

/// Feature width; 0 for a null handle.
///
/// # Safety
/// `t` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ep_sparse_tensor_channels(t: *const EpSparseTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.channels())
}

/// Writes the grid extent as `(D, H, W)`.
///
/// # Safety
/// `t` must be a live handle and `out` must hold three values.
#[no_mangle]
pub unsafe extern "C" fn ep_sparse_tensor_extent(t: *const EpSparseTensor, out: *mut usize) -> EpStatus {
    guard(|| {
        let e = handle(t, "tensor")?.0.extent();
        output(out, 3, "out")?.copy_from_slice(&[e.d, e.h, e.w]);
        Ok(())
    })
}

/// # Safety
/// `t` must be a live handle and `out` must hold `capacity` elements.
#[no_mangle]
pub unsafe extern "C" fn ep_sparse_tensor_coords(t: *const EpSparseTensor, out: *mut u32, capacity: usize) -> EpStatus {
    guard(|| {
        let t = &handle(t, "tensor")?.0;
        check_capacity(capacity, 4 * t.len(), "coordinates")?;
        coords_to_u32(t.coords(), output(out, 4 * t.len(), "out")?);
        Ok(())
    })
}

/// # Safety
/// `t` must be a live handle and `out` must hold `capacity` elements.
#[no_mangle]
pub unsafe extern "C" fn ep_sparse_tensor_features(
    t: *const EpSparseTensor,
    out: *mut f32,
    capacity: usize,
) -> EpStatus {
    guard(|| {
        let f = handle(t, "tensor")?.0.features();
        check_capacity(capacity, f.len(), "features")?;
        output(out, f.len(), "out")?.copy_from_slice(f);
        Ok(())
    })
}

/// # Safety
/// `t` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ep_sparse_tensor_free(t: *mut EpSparseTensor) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// A cubic sparse convolution with weights drawn from `seed`. A non-zero
/// `submanifold` keeps the input sites (stride 1, padding `kernel / 2`);
/// otherwise `stride` and `padding` apply.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ep_sparse_conv_new(
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    submanifold: i32,
    seed: u64,
    out: *mut *mut EpSparseConv,
) -> EpStatus {
    guard(|| {
        let geometry = if submanifold != 0 {
            ConvGeometry::submanifold(kernel)
        } else {
            ConvGeometry::regular(kernel, stride, padding)
        };
        let layer = SparseConvLayer::new(in_channels, out_channels, geometry, &mut seeded(seed))?;
        put(out, EpSparseConv(layer))
    })
}

/// Replaces the weights (`k^3 * in * out`, offset-major then input then
/// output channel) and the bias (`out`).
///
/// # Safety
/// `weight` and `bias` must hold the stated number of values.
#[no_mangle]
pub unsafe extern "C" fn ep_sparse_conv_set_weights(
    layer: *mut EpSparseConv,
    weight: *const f32,
    weight_len: usize,
    bias: *const f32,
    bias_len: usize,
) -> EpStatus {
    guard(|| {
        let l = &mut handle_mut(layer, "layer")?.0;
        if weight_len != l.weight.len() || bias_len != l.bias.len() {
            return Err(Error::Shape(format!(
                "layer needs {} weights and {} biases, got {weight_len} and {bias_len}",
                l.weight.len(),
                l.bias.len()
            ))
            .into());
        }
        l.weight.data.copy_from_slice(input(weight, weight_len, "weight")?);
        l.bias.data.copy_from_slice(input(bias, bias_len, "bias")?);
        Ok(())
    })
}

/// # Safety
/// `layer` and `x` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ep_sparse_conv_forward(
    layer: *const EpSparseConv,
    x: *const EpSparseTensor,
    out: *mut *mut EpSparseTensor,
) -> EpStatus {
    guard(|| {
        let (y, _) = sparse_conv_forward(&handle(x, "input tensor")?.0, &handle(layer, "layer")?.0)?;
        put(out, EpSparseTensor(y))
    })
}

/// # Safety
/// `layer` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ep_sparse_conv_free(layer: *mut EpSparseConv) {
    if !layer.is_null() {
        drop(Box::from_raw(layer));
    }
}

/// lr 1e-4, betas (0.9, 0.999), eps 1e-8, blocks of 256.
#[no_mangle]
pub extern "C" fn ep_optim_config_default() -> EpOptimConfig {
    let c = OptimConfig::default();
    EpOptimConfig { lr: c.lr, beta1: c.beta1, beta2: c.beta2, eps: c.eps, block_size: c.block_size }
}

/// Adam over `n_tensors` parameter tensors with the given lengths.
///
/// # Safety
/// `config` must be valid, `sizes` must hold `n_tensors` values, `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn ep_optimizer_new(
    kind: EpOptimizerKind,
    config: *const EpOptimConfig,
    sizes: *const usize,
    n_tensors: usize,
    out: *mut *mut EpOptimizer,
) -> EpStatus {
    guard(|| {
        let c = handle(config, "config")?;
        let cfg = OptimConfig { lr: c.lr, beta1: c.beta1, beta2: c.beta2, eps: c.eps, block_size: c.block_size };
        let kind = match kind {
            EpOptimizerKind::Fp32 => OptimizerKind::Fp32,
            EpOptimizerKind::EightBit => OptimizerKind::EightBit,
        };
        let sizes = input(sizes, n_tensors, "sizes")?.to_vec();
        put(out, EpOptimizer { inner: Optimizer::new(kind, cfg, &sizes)?, sizes })
    })
}

/// One Adam step. `params[i]` is updated in place from `grads[i]`; both
/// hold the length given at construction. A null gradient counts as zero.
/// Nothing is written when any input is rejected.
///
/// # Safety
/// `params` and `grads` must hold `n_tensors` pointers to buffers of the
/// registered lengths.
#[no_mangle]
pub unsafe extern "C" fn ep_optimizer_step(
    opt: *mut EpOptimizer,
    params: *const *mut f32,
    grads: *const *const f32,
    n_tensors: usize,
) -> EpStatus {
    guard(|| {
        let opt = handle_mut(opt, "optimizer")?;
        if n_tensors != opt.sizes.len() {
            return Err(Error::Shape(format!("optimizer tracks {} tensors, got {n_tensors}", opt.sizes.len())).into());
        }
        let ps = input(params, n_tensors, "params")?;
        let gs = input(grads, n_tensors, "grads")?;
        let mut values = Vec::with_capacity(n_tensors);
        for (i, &n) in opt.sizes.iter().enumerate() {
            let mut v = Value::new(vec![n], input(ps[i], n, "parameter buffer")?.to_vec())?;
            v.grad = if gs[i].is_null() { None } else { Some(input(gs[i], n, "gradient buffer")?.to_vec()) };
            values.push(v);
        }
        let mut refs: Vec<&mut Value<f32>> = values.iter_mut().collect();
        opt.inner.step(&mut refs)?;
        for (i, v) in values.iter().enumerate() {
            output(ps[i], v.len(), "parameter buffer")?.copy_from_slice(&v.data);
        }
        Ok(())
    })
}

/// Bytes of optimizer state; 0 for a null handle.
///
/// # Safety
/// `opt` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ep_optimizer_state_bytes(opt: *const EpOptimizer) -> usize {
    opt.as_ref().map_or(0, |o| o.inner.state_bytes())
}

/// Steps taken; 0 for a null handle.
///
/// # Safety
/// `opt` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ep_optimizer_step_count(opt: *const EpOptimizer) -> u64 {
    opt.as_ref().map_or(0, |o| o.inner.step_count())
}

/// Serializes the 8-bit state. `*written` always receives the checkpoint
/// size; pass a null `buf` to query it, in which case the call returns
/// `EP_STATUS_BUFFER_TOO_SMALL`.
///
/// # Safety
/// `buf` must be null or hold `capacity` bytes; `written` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ep_optimizer_checkpoint(
    opt: *const EpOptimizer,
    buf: *mut u8,
    capacity: usize,
    written: *mut usize,
) -> EpStatus {
    guard(|| {
        let bytes = handle(opt, "optimizer")?.inner.checkpoint()?;
        *handle_mut(written, "written")? = bytes.len();
        if buf.is_null() {
            return Err(Fail(EpStatus::BufferTooSmall, format!("checkpoint needs {} bytes", bytes.len())));
        }
        check_capacity(capacity, bytes.len(), "checkpoint")?;
        output(buf, bytes.len(), "buf")?.copy_from_slice(&bytes);
        Ok(())
    })
}

/// # Safety
/// `bytes` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn ep_optimizer_restore(opt: *mut EpOptimizer, bytes: *const u8, len: usize) -> EpStatus {
    guard(|| {
        let o = handle_mut(opt, "optimizer")?;
        o.inner.restore(input(bytes, len, "bytes")?)?;
        Ok(())
    })
}

/// # Safety
/// `opt` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ep_optimizer_free(opt: *mut EpOptimizer) {
    if !opt.is_null() {
        drop(Box::from_raw(opt));
    }
}

/// Blockwise absmax int8 quantization of `n` values. `scales` receives
/// `ceil(n / block_size)` values.
///
/// # Safety
/// `x` and `codes` must hold `n` elements, `scales` the block count.
#[no_mangle]
pub unsafe extern "C" fn ep_quantize_block(
    x: *const f32,
    n: usize,
    block_size: usize,
    codes: *mut i8,
    scales: *mut f32,
) -> EpStatus {
    guard(|| {
        let (c, s) = quantize_block(input(x, n, "x")?, block_size)?;
        output(codes, c.len(), "codes")?.copy_from_slice(&c);
        output(scales, s.len(), "scales")?.copy_from_slice(&s);
        Ok(())
    })
}

/// Inverse of [`ep_quantize_block`]: `out[i] = codes[i] / 127 * scale`.
///
/// # Safety
/// `codes` and `out` must hold `n` elements, `scales` the block count.
#[no_mangle]
pub unsafe extern "C" fn ep_dequantize_block(
    codes: *const i8,
    n: usize,
    scales: *const f32,
    block_size: usize,
    out: *mut f32,
) -> EpStatus {
    guard(|| {
        if block_size == 0 {
            return Err(Error::Config("block_size must be >= 1".into()).into());
        }
        let blocks = n.div_ceil(block_size);
        let x = dequantize_block(input(codes, n, "codes")?, input(scales, blocks, "scales")?, block_size)?;
        output(out, n, "out")?.copy_from_slice(&x);
        Ok(())
    })
}
