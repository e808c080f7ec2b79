//! Small building blocks shared by the encoders and heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::{lit, Parameters, Scalar, Value};

/// RNG used for initialization, sampling and dropout.
pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a stream id into a seed (splitmix64 finalizer).
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    /// Linear pass-through, used to probe layers without kinks.
    Identity,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Identity => x,
        }
    }

    /// Derivative evaluated at the pre-activation value.
    pub fn derivative<T: Scalar>(self, pre: T) -> T {
        match self {
            Activation::Relu if pre > T::zero() => T::one(),
            Activation::Relu => T::zero(),
            Activation::Identity => T::one(),
        }
    }

    pub fn apply_slice<T: Scalar>(self, xs: &mut [T]) {
        if self == Activation::Relu {
            xs.iter_mut().for_each(|v| *v = v.max(T::zero()));
        }
    }

    /// `grad *= act'(pre)` elementwise.
    pub fn backprop<T: Scalar>(self, pre: &[T], grad: &mut [T]) {
        if self == Activation::Relu {
            grad.iter_mut().zip(pre).for_each(|(g, &p)| {
                if p <= T::zero() {
                    *g = T::zero();
                }
            });
        }
    }
}

/// Fully connected layer applied row-wise: `y = W x + b`, `W` is `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T = f32> {
    pub weight: Value<T>,
    pub bias: Value<T>,
}

impl<T: Scalar> Linear<T> {
    /// Fan-in scaled uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = (6.0 / input as f64).sqrt();
        Self { weight: Value::uniform(vec![output, input], bound, rng), bias: Value::zeros(vec![output]) }
    }

    pub fn from_parts(weight: Value<T>, bias: Value<T>) -> Result<Self> {
        if weight.shape.len() != 2 || bias.shape != [weight.shape[0]] {
            return Err(shape_err!("linear weight {:?} / bias {:?}", weight.shape, bias.shape));
        }
        Ok(Self { weight, bias })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn forward(&self, x: &[T], rows: usize) -> Vec<T> {
        let (n_in, n_out) = (self.input_dim(), self.output_dim());
        debug_assert_eq!(x.len(), rows * n_in);
        let w = &self.weight.data;
        let mut y = Vec::with_capacity(rows * n_out);
        for r in 0..rows {
            let xr = &x[r * n_in..(r + 1) * n_in];
            for o in 0..n_out {
                let wr = &w[o * n_in..(o + 1) * n_in];
                let mut acc = self.bias.data[o];
                for (a, b) in wr.iter().zip(xr) {
                    acc += *a * *b;
                }
                y.push(acc);
            }
        }
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &[T], rows: usize, grad_y: &[T]) -> Vec<T> {
        let (n_in, n_out) = (self.input_dim(), self.output_dim());
        let mut gw = vec![T::zero(); n_out * n_in];
        let mut gb = vec![T::zero(); n_out];
        let mut gx = vec![T::zero(); rows * n_in];
        let w = &self.weight.data;
        for r in 0..rows {
            let xr = &x[r * n_in..(r + 1) * n_in];
            let gxr = &mut gx[r * n_in..(r + 1) * n_in];
            for o in 0..n_out {
                let g = grad_y[r * n_out + o];
                if g == T::zero() {
                    continue;
                }
                gb[o] += g;
                let wr = &w[o * n_in..(o + 1) * n_in];
                let gwr = &mut gw[o * n_in..(o + 1) * n_in];
                for i in 0..n_in {
                    gwr[i] += g * xr[i];
                    gxr[i] += g * wr[i];
                }
            }
        }
        self.weight.accumulate_grad(&gw);
        self.bias.accumulate_grad(&gb);
        gx
    }

    pub fn cast<U: Scalar>(&self) -> Linear<U> {
        Linear { weight: self.weight.cast(), bias: self.bias.cast() }
    }
}

impl<T: Scalar> Parameters<T> for Linear<T> {
    fn params(&self) -> Vec<&Value<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Value<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Inverted dropout: keeps each unit with probability `1 - rate` and rescales
/// survivors by `1 / (1 - rate)`. Returns the per-element multiplier.
pub fn dropout_mask<T: Scalar, R: Rng + ?Sized>(n: usize, rate: f64, rng: &mut R) -> Vec<T> {
    let keep = lit::<T>(1.0 / (1.0 - rate));
    (0..n).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dropout_scales_survivors() {
        let mut rng = seeded(3);
        let m: Vec<f64> = dropout_mask(10_000, 0.3, &mut rng);
        let zeros = m.iter().filter(|&&v| v == 0.0).count() as f64 / 1e4;
        assert!((zeros - 0.3).abs() < 0.02);
        assert!(m.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-12));
    }

    #[test]
    fn linear_backward_matches_manual() {
        let mut l = Linear::<f64>::from_parts(
            Value::new(vec![1, 2], vec![2.0, -1.0]).unwrap(),
            Value::new(vec![1], vec![0.5]).unwrap(),
        )
        .unwrap();
        let x = [1.0, 3.0];
        assert_eq!(l.forward(&x, 1), vec![2.0 - 3.0 + 0.5]);
        let gx = l.backward(&x, 1, &[1.0]);
        assert_eq!(gx, vec![2.0, -1.0]);
        assert_eq!(l.weight.grad().unwrap(), &[1.0, 3.0]);
        assert_eq!(l.bias.grad().unwrap(), &[1.0]);
    }

    #[test]
    fn mix_seed_separates_streams() {
        assert_ne!(mix_seed(1, 2), mix_seed(1, 3));
        assert_ne!(mix_seed(1, 2), mix_seed(2, 2));
        assert_eq!(mix_seed(7, 9), mix_seed(7, 9));
    }
}
