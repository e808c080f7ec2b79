//! Adam with 8-bit block-quantized moment states, plus the full-precision
//! Adam it is measured against.
//!
//! Moments are stored as signed 8-bit codes with one `f32` absmax scale per
//! block of `block_size` elements: `code = round(x / scale * 127)` with ties
//! away from zero, decoded as `code / 127 * scale`. Parameters stay `f32`.
//!
//! Checkpoint layout (all little-endian):
//!
//! ```text
//! magic "EPQ8" | version u32 | block_size u32 | step_count u64 | tensors u32
//! per tensor:  len u64 | m_codes [i8; len] | v_codes [i8; len]
//!              | m_scales [f32; blocks] | v_scales [f32; blocks]
//! ```

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::tensor::Value;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub block_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, block_size: 256 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let beta_ok = |b: f64| (0.0..1.0).contains(&b);
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_err!("learning rate must be positive, got {}", self.lr));
        }
        if !beta_ok(self.beta1) || !beta_ok(self.beta2) {
            return Err(config_err!("betas must lie in [0, 1), got ({}, {})", self.beta1, self.beta2));
        }
        if !(self.eps > 0.0) {
            return Err(config_err!("eps must be positive, got {}", self.eps));
        }
        if self.block_size == 0 {
            return Err(config_err!("block_size must be >= 1"));
        }
        Ok(())
    }
}

pub const CODE_MAX: i8 = 127;

fn quantize_one(x: f32, scale: f32) -> i8 {
    if scale == 0.0 {
        return 0;
    }
    // f64 keeps the ratio exact enough that only the final rounding matters
    let q = (x as f64 / scale as f64 * CODE_MAX as f64).round();
    q.clamp(-(CODE_MAX as f64), CODE_MAX as f64) as i8
}

fn dequantize_one(code: i8, scale: f32) -> f32 {
    (code as f64 / CODE_MAX as f64 * scale as f64) as f32
}

/// Second-moment decode used by the optimizer. A zero code in a non-zero
/// block stands for "somewhere below half a step", so it reads back as that
/// half step instead of 0; otherwise a small `v` next to a surviving `m`
/// would turn the update into `m / eps`.
fn decode_second_moment(code: i8, scale: f32) -> f32 {
    if code == 0 {
        (scale as f64 / (2 * CODE_MAX as i32) as f64) as f32
    } else {
        dequantize_one(code, scale).max(0.0)
    }
}

fn quantize_into(x: &[f32], codes: &mut [i8]) -> f32 {
    let scale = x.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    for (c, &v) in codes.iter_mut().zip(x) {
        *c = quantize_one(v, scale);
    }
    scale
}

/// Blockwise absmax quantization. Returns codes and one scale per block.
pub fn quantize_block(x: &[f32], block_size: usize) -> Result<(Vec<i8>, Vec<f32>)> {
    if block_size == 0 {
        return Err(config_err!("block_size must be >= 1"));
    }
    if let Some(v) = x.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("cannot quantize non-finite value {v}")));
    }
    let mut codes = vec![0i8; x.len()];
    let scales = x.chunks(block_size).zip(codes.chunks_mut(block_size)).map(|(xb, cb)| quantize_into(xb, cb)).collect();
    Ok((codes, scales))
}

pub fn dequantize_block(codes: &[i8], scales: &[f32], block_size: usize) -> Result<Vec<f32>> {
    if block_size == 0 || scales.len() != codes.len().div_ceil(block_size) {
        return Err(shape_err!("{} scales for {} codes at block size {block_size}", scales.len(), codes.len()));
    }
    Ok(codes
        .chunks(block_size)
        .zip(scales)
        .flat_map(|(cb, &s)| cb.iter().map(move |&c| dequantize_one(c, s)))
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fp32State {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
}

impl Fp32State {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn state_bytes(&self) -> usize {
        8 * self.m.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Quantized8State {
    pub m_codes: Vec<i8>,
    pub v_codes: Vec<i8>,
    pub m_scales: Vec<f32>,
    pub v_scales: Vec<f32>,
    pub block_size: usize,
    pub step: u64,
}

impl Quantized8State {
    pub fn new(n: usize, block_size: usize) -> Self {
        let blocks = n.div_ceil(block_size.max(1));
        Self {
            m_codes: vec![0; n],
            v_codes: vec![0; n],
            m_scales: vec![0.0; blocks],
            v_scales: vec![0.0; blocks],
            block_size: block_size.max(1),
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m_codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m_codes.is_empty()
    }

    pub fn blocks(&self) -> usize {
        self.m_scales.len()
    }

    /// Two codes per element plus two `f32` scales per block.
    pub fn state_bytes(&self) -> usize {
        2 * self.len() + 8 * self.blocks()
    }

    pub fn first_moment(&self) -> Vec<f32> {
        dequantize_block(&self.m_codes, &self.m_scales, self.block_size).expect("consistent state")
    }

    /// Second moment as the update step reads it.
    pub fn second_moment(&self) -> Vec<f32> {
        self.v_codes
            .chunks(self.block_size)
            .zip(&self.v_scales)
            .flat_map(|(cb, &s)| cb.iter().map(move |&c| decode_second_moment(c, s)))
            .collect()
    }
}

fn check_step(params: &[f32], grads: &[f32], state_len: usize) -> Result<()> {
    if params.len() != grads.len() || params.len() != state_len {
        return Err(shape_err!(
            "params ({}), grads ({}) and state ({}) differ in length",
            params.len(),
            grads.len(),
            state_len
        ));
    }
    if let Some(g) = grads.iter().find(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient {g}")));
    }
    Ok(())
}

/// Bias-correction factors `(1 - beta1^t, 1 - beta2^t)`.
fn corrections(cfg: &OptimConfig, step: u64) -> (f64, f64) {
    let t = step as i32;
    (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t))
}

/// Moment update and parameter step shared by both state layouts.
fn adam_update(params: &mut [f32], grads: &[f32], m: &mut [f32], v: &mut [f32], cfg: &OptimConfig, bc: (f64, f64)) {
    for i in 0..params.len() {
        let g = grads[i] as f64;
        let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * g;
        let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * g * g;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let m_hat = m[i] as f64 / bc.0;
        let v_hat = (v[i] as f64).max(0.0) / bc.1;
        params[i] = (params[i] as f64 - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps)) as f32;
    }
}

pub fn adam_step_fp32(params: &mut [f32], grads: &[f32], state: &mut Fp32State, cfg: &OptimConfig) -> Result<()> {
    check_step(params, grads, state.len())?;
    state.step += 1;
    let bc = corrections(cfg, state.step);
    adam_update(params, grads, &mut state.m, &mut state.v, cfg, bc);
    Ok(())
}

/// Decodes both moments block by block, applies the Adam update, and
/// re-encodes. Blocks are independent and run in parallel.
pub fn adam_step_8bit(params: &mut [f32], grads: &[f32], state: &mut Quantized8State, cfg: &OptimConfig) -> Result<()> {
    check_step(params, grads, state.len())?;
    state.step += 1;
    let bc = corrections(cfg, state.step);
    let bs = state.block_size;
    params
        .par_chunks_mut(bs)
        .zip(grads.par_chunks(bs))
        .zip(state.m_codes.par_chunks_mut(bs).zip(state.v_codes.par_chunks_mut(bs)))
        .zip(state.m_scales.par_iter_mut().zip(state.v_scales.par_iter_mut()))
        .for_each(|(((p, g), (mc, vc)), (ms, vs))| {
            let mut m: Vec<f32> = mc.iter().map(|&c| dequantize_one(c, *ms)).collect();
            let mut v: Vec<f32> = vc.iter().map(|&c| decode_second_moment(c, *vs)).collect();
            adam_update(p, g, &mut m, &mut v, cfg, bc);
            *ms = quantize_into(&m, mc);
            *vs = quantize_into(&v, vc);
        });
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum OptimizerKind {
    #[serde(rename = "fp32")]
    Fp32,
    #[default]
    #[serde(rename = "8bit")]
    EightBit,
}

#[derive(Clone, Debug, PartialEq)]
enum States {
    Fp32(Vec<Fp32State>),
    EightBit(Vec<Quantized8State>),
}

/// Adam over a fixed list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub config: OptimConfig,
    states: States,
}

const MAGIC: &[u8; 4] = b"EPQ8";
const VERSION: u32 = 1;

impl Optimizer {
    pub fn new(kind: OptimizerKind, config: OptimConfig, sizes: &[usize]) -> Result<Self> {
        config.validate()?;
        let states = match kind {
            OptimizerKind::Fp32 => States::Fp32(sizes.iter().map(|&n| Fp32State::new(n)).collect()),
            OptimizerKind::EightBit => {
                States::EightBit(sizes.iter().map(|&n| Quantized8State::new(n, config.block_size)).collect())
            }
        };
        Ok(Self { config, states })
    }

    pub fn for_params(kind: OptimizerKind, config: OptimConfig, params: &[&Value<f32>]) -> Result<Self> {
        let sizes: Vec<usize> = params.iter().map(|p| p.len()).collect();
        Self::new(kind, config, &sizes)
    }

    pub fn kind(&self) -> OptimizerKind {
        match self.states {
            States::Fp32(_) => OptimizerKind::Fp32,
            States::EightBit(_) => OptimizerKind::EightBit,
        }
    }

    pub fn step_count(&self) -> u64 {
        match &self.states {
            States::Fp32(s) => s.first().map_or(0, |s| s.step),
            States::EightBit(s) => s.first().map_or(0, |s| s.step),
        }
    }

    /// Optimizer state footprint in bytes.
    pub fn state_bytes(&self) -> usize {
        match &self.states {
            States::Fp32(s) => s.iter().map(Fp32State::state_bytes).sum(),
            States::EightBit(s) => s.iter().map(Quantized8State::state_bytes).sum(),
        }
    }

    /// One step over every tensor; a missing gradient counts as zero.
    pub fn step(&mut self, params: &mut [&mut Value<f32>]) -> Result<()> {
        let n = match &self.states {
            States::Fp32(s) => s.len(),
            States::EightBit(s) => s.len(),
        };
        if params.len() != n {
            return Err(shape_err!("optimizer tracks {n} tensors, got {}", params.len()));
        }
        // validate everything first so a failure leaves no tensor half-updated
        for p in params.iter() {
            let g = p.grad.as_deref().unwrap_or(&[]);
            if !g.is_empty() {
                check_step(&p.data, g, p.len())?;
            }
        }
        let cfg = self.config;
        for (i, p) in params.iter_mut().enumerate() {
            let grad = p.grad.take().unwrap_or_else(|| vec![0.0; p.len()]);
            match &mut self.states {
                States::Fp32(s) => adam_step_fp32(&mut p.data, &grad, &mut s[i], &cfg)?,
                States::EightBit(s) => adam_step_8bit(&mut p.data, &grad, &mut s[i], &cfg)?,
            }
            p.grad = Some(grad);
        }
        Ok(())
    }

    pub fn quantized_states(&self) -> Option<&[Quantized8State]> {
        match &self.states {
            States::EightBit(s) => Some(s),
            States::Fp32(_) => None,
        }
    }

    /// Serializes 8-bit states in the checkpoint layout above.
    pub fn checkpoint(&self) -> Result<Vec<u8>> {
        let states = self
            .quantized_states()
            .ok_or_else(|| Error::State("only 8-bit optimizer states are checkpointed".into()))?;
        Ok(write_checkpoint(states, self.config.block_size, self.step_count()))
    }

    /// Restores 8-bit states; tensor count and sizes must match.
    pub fn restore(&mut self, bytes: &[u8]) -> Result<()> {
        let (block_size, states) = read_checkpoint(bytes)?;
        match &mut self.states {
            States::EightBit(cur) => {
                if block_size != self.config.block_size
                    || cur.len() != states.len()
                    || cur.iter().zip(&states).any(|(a, b)| a.len() != b.len())
                {
                    return Err(Error::Format("checkpoint does not match this optimizer's tensors".into()));
                }
                *cur = states;
                Ok(())
            }
            States::Fp32(_) => Err(Error::State("cannot restore 8-bit states into an fp32 optimizer".into())),
        }
    }
}

pub fn write_checkpoint(states: &[Quantized8State], block_size: usize, step: u64) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(block_size as u32).to_le_bytes());
    out.extend_from_slice(&step.to_le_bytes());
    out.extend_from_slice(&(states.len() as u32).to_le_bytes());
    for s in states {
        out.extend_from_slice(&(s.len() as u64).to_le_bytes());
        out.extend(s.m_codes.iter().map(|&c| c as u8));
        out.extend(s.v_codes.iter().map(|&c| c as u8));
        for v in s.m_scales.iter().chain(&s.v_scales) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint into `(block_size, states)`.
pub fn read_checkpoint(bytes: &[u8]) -> Result<(usize, Vec<Quantized8State>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let block_size = r.u32()? as usize;
    if block_size == 0 {
        return Err(Error::Format("zero block size".into()));
    }
    let step = r.u64()?;
    let count = r.u32()? as usize;
    let mut states = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = usize::try_from(r.u64()?).map_err(|_| Error::Format("tensor too large".into()))?;
        let blocks = n.div_ceil(block_size);
        let m_codes = r.take(n)?.iter().map(|&b| b as i8).collect();
        let v_codes = r.take(n)?.iter().map(|&b| b as i8).collect();
        let mut scales = |k: usize| -> Result<Vec<f32>> {
            Ok(r.take(4 * k)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let m_scales = scales(blocks)?;
        let v_scales = scales(blocks)?;
        states.push(Quantized8State { m_codes, v_codes, m_scales, v_scales, block_size, step });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok((block_size, states))
}
