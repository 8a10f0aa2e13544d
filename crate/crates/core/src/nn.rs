//! Shared differentiable building blocks: activations, layer norm, dense
//! layers, softmax, parameter initializers and the Adam optimizer.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use libm::erf;

use crate::error::Error;
use crate::params::{ParamSet, Tensor};

pub const LN_EPS: f64 = 1e-5;
const LEAKY_SLOPE: f64 = 0.01;

/// Deterministic RNG for a `(seed, stream)` pair.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Silu,
    Relu,
    LeakyRelu,
    Gelu,
}

impl Activation {
    pub fn forward(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Gelu => 0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2)),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Gelu => {
                let cdf = 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                cdf + x * pdf
            }
        }
    }

    /// Backward through the activation. In guided mode the signal passes only
    /// where the pre-activation was positive and the incoming gradient is positive.
    pub fn backward(self, pre: f64, grad: f64, guided: bool) -> f64 {
        if guided && !(pre > 0.0 && grad > 0.0) {
            return 0.0;
        }
        grad * self.derivative(pre)
    }

    pub fn code(self) -> f64 {
        match self {
            Activation::Silu => 0.0,
            Activation::Relu => 1.0,
            Activation::LeakyRelu => 2.0,
            Activation::Gelu => 3.0,
        }
    }

    pub fn from_code(code: f64) -> Option<Self> {
        match code as i64 {
            0 => Some(Activation::Silu),
            1 => Some(Activation::Relu),
            2 => Some(Activation::LeakyRelu),
            3 => Some(Activation::Gelu),
            _ => None,
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "silu" => Ok(Activation::Silu),
            "relu" => Ok(Activation::Relu),
            "leaky_relu" | "leakyrelu" => Ok(Activation::LeakyRelu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Activation::Silu => "silu",
            Activation::Relu => "relu",
            Activation::LeakyRelu => "leaky_relu",
            Activation::Gelu => "gelu",
        };
        f.write_str(s)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Cached statistics of a row-wise layer norm.
#[derive(Debug, Clone)]
pub struct LnCache {
    pub xhat: Array2<f64>,
    pub rstd: Array1<f64>,
}

/// Row-wise layer norm with affine scale and shift.
pub fn layer_norm(
    x: ArrayView2<f64>,
    gamma: ArrayView1<f64>,
    beta: ArrayView1<f64>,
) -> (Array2<f64>, LnCache) {
    let (rows, cols) = x.dim();
    let mut xhat = Array2::zeros((rows, cols));
    let mut rstd = Array1::zeros(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.sum() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for c in 0..cols {
            xhat[[r, c]] = (row[c] - mean) * rs;
        }
    }
    let y = &xhat * &gamma + &beta;
    (y, LnCache { xhat, rstd })
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(
    dy: ArrayView2<f64>,
    gamma: ArrayView1<f64>,
    cache: &LnCache,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let (rows, cols) = dy.dim();
    let dgamma = (&dy * &cache.xhat).sum_axis(Axis(0));
    let dbeta = dy.sum_axis(Axis(0));
    let dxhat = &dy * &gamma;
    let mut dx = Array2::zeros((rows, cols));
    let n = cols as f64;
    for r in 0..rows {
        let dxh = dxhat.row(r);
        let xh = cache.xhat.row(r);
        let mean_d = dxh.sum() / n;
        let mean_dx = dxh.dot(&xh) / n;
        for c in 0..cols {
            dx[[r, c]] = cache.rstd[r] * (dxh[c] - mean_d - xh[c] * mean_dx);
        }
    }
    (dx, dgamma, dbeta)
}

/// `x · Wᵀ + b` with `W` stored as (out, in).
pub fn linear(x: ArrayView2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    x.dot(&w.t()) + &b
}

/// Returns `(dx, dW, db)` for [`linear`].
pub fn linear_backward(
    dy: ArrayView2<f64>,
    x: ArrayView2<f64>,
    w: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let dx = dy.dot(&w);
    let dw = dy.t().dot(&x);
    let db = dy.sum_axis(Axis(0));
    (dx, dw, db)
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Log-softmax of a single logit vector.
pub fn log_softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.mapv(|v| v - lse)
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual default for conv and dense layers.
pub fn uniform_fan_in(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

/// Normal(0, std) truncated at two standard deviations.
pub fn trunc_normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: ParamSet,
    v: ParamSet,
}

impl Adam {
    pub fn new(lr: f64, params: &ParamSet) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every tensor named in `grads`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads.iter() {
            let (Ok(p), Ok(m), Ok(v)) = (
                params.get_mut(name),
                self.m.get_mut(name),
                self.v.get_mut(name),
            ) else {
                continue;
            };
            for i in 0..g.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn central_diff(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn activation_derivatives_match_finite_differences() {
        for act in [Activation::Silu, Activation::Gelu, Activation::Relu, Activation::LeakyRelu] {
            for &x in &[-2.3, -0.4, 0.3, 1.7] {
                let fd = central_diff(|v| act.forward(v), x);
                assert!((fd - act.derivative(x)).abs() < 1e-7, "{act} at {x}");
            }
        }
    }

    #[test]
    fn guided_gate_blocks_negative_signals() {
        let a = Activation::Silu;
        assert_eq!(a.backward(-1.0, 1.0, true), 0.0);
        assert_eq!(a.backward(1.0, -1.0, true), 0.0);
        assert_eq!(a.backward(1.0, 2.0, true), a.backward(1.0, 2.0, false));
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let x = array![[0.3, -1.2, 2.0, 0.7], [1.0, 1.5, -0.5, 0.0]];
        let g = array![1.1, 0.9, -0.4, 2.0];
        let b = array![0.1, 0.0, -0.2, 0.3];
        let w = array![[0.5, -1.0, 2.0, 0.25], [1.0, 0.3, -0.7, 0.9]];
        let loss = |x: &Array2<f64>| (layer_norm(x.view(), g.view(), b.view()).0 * &w).sum();
        let (_, cache) = layer_norm(x.view(), g.view(), b.view());
        let (dx, _, _) = layer_norm_backward(w.view(), g.view(), &cache);
        for r in 0..2 {
            for c in 0..4 {
                let mut xp = x.clone();
                xp[[r, c]] += 1e-6;
                let mut xm = x.clone();
                xm[[r, c]] -= 1e-6;
                let fd = (loss(&xp) - loss(&xm)) / 2e-6;
                assert!((fd - dx[[r, c]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let s = softmax_rows(array![[1000.0, 1001.0], [-3.0, 4.0]].view());
        for row in s.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap());
        let mut g = p.zeros_like();
        g.get_mut("w").unwrap().data = vec![0.5, -0.5];
        let mut opt = Adam::new(0.1, &p);
        opt.step(&mut p, &g);
        let w = &p.get("w").unwrap().data;
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }
}
