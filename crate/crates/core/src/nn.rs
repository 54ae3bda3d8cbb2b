//! Dense layers with hand-written backward passes.
//!
//! Only gradients with respect to layer *inputs* are needed for the frozen
//! backbone; the trainable head additionally exposes parameter gradients.

use ndarray::{Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{uniform_matrix, xavier_bound};

/// Row-vector affine map `y = x W + b` with `W` stored `in x out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: uniform_matrix(rng, fan_in, fan_out, xavier_bound(fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Array2::eye(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    pub fn forward_vec(&self, x: &Array1<f64>) -> Array1<f64> {
        x.dot(&self.weight) + &self.bias
    }

    pub fn backward_input(&self, dy: &Array2<f64>) -> Array2<f64> {
        dy.dot(&self.weight.t())
    }

    pub fn backward_input_vec(&self, dy: &Array1<f64>) -> Array1<f64> {
        self.weight.dot(dy)
    }

    /// Accumulates `dW += x^T dy`, `db += dy` for a single row.
    pub fn accumulate_grad_vec(&self, x: &Array1<f64>, dy: &Array1<f64>, grad: &mut Linear) {
        for (i, xi) in x.iter().enumerate() {
            if *xi == 0.0 {
                continue;
            }
            let mut row = grad.weight.row_mut(i);
            row.scaled_add(*xi, dy);
        }
        grad.bias += dy;
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in xhat.axis_iter_mut(Axis(0)).zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            *s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            let scale = *s;
            row.mapv_inplace(|v| v * scale);
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Array2<f64>) -> Array2<f64> {
        let d = dy.ncols() as f64;
        let dxhat = dy * &self.gamma;
        let mut dx = Array2::zeros(dy.raw_dim());
        for (((mut out, g), xh), s) in dx
            .axis_iter_mut(Axis(0))
            .zip(dxhat.axis_iter(Axis(0)))
            .zip(cache.xhat.axis_iter(Axis(0)))
            .zip(cache.inv_std.iter())
        {
            let mean_g = g.sum() / d;
            let mean_gx = g.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
            for ((o, gi), xi) in out.iter_mut().zip(g.iter()).zip(xh.iter()) {
                *o = s * (gi - mean_g - xi * mean_gx);
            }
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// Row-wise softmax, numerically stabilised.
pub fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}
