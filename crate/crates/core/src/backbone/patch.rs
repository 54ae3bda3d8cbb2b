use ndarray::{s, Array1, Array2, Array3};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TokenSequence;
use crate::error::{Error, Result};
use crate::linalg::{uniform_matrix, uniform_vector};

/// Linear patch projection, frozen class token and positional table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchEmbed {
    /// Patch side in input cells.
    pub patch_size: usize,
    pub channels: usize,
    /// `(channels * p * p) x d`, rows ordered `(py, px, c)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub class_token: Array1<f64>,
    /// `(1 + patches) x d`; row 0 belongs to the class token.
    pub position: Array2<f64>,
}

impl PatchEmbed {
    pub fn new(rng: &mut ChaCha8Rng, patch_size: usize, channels: usize, width: usize, patches: usize) -> Self {
        let fan_in = channels * patch_size * patch_size;
        Self {
            patch_size,
            channels,
            weight: uniform_matrix(rng, fan_in, width, (3.0 / fan_in as f64).sqrt()),
            bias: Array1::zeros(width),
            class_token: uniform_vector(rng, width, 1.0),
            position: uniform_matrix(rng, patches + 1, width, 0.5),
        }
    }

    pub fn width(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, input: &Array3<f64>) -> Result<TokenSequence> {
        let (h, w, c) = input.dim();
        let p = self.patch_size;
        if c != self.channels {
            return Err(Error::InputShape(format!("expected {} channels, got {c}", self.channels)));
        }
        if h != w || h % p != 0 {
            return Err(Error::InputShape(format!(
                "input {h}x{w} is not a square multiple of patch side {p}"
            )));
        }
        let side = h / p;
        let count = side * side;
        if count + 1 != self.position.nrows() {
            return Err(Error::InputShape(format!(
                "input yields {count} patches, positional table expects {}",
                self.position.nrows() - 1
            )));
        }
        let mut patches = Array2::<f64>::zeros((count, c * p * p));
        for py in 0..side {
            for px in 0..side {
                let block = input.slice(s![py * p..(py + 1) * p, px * p..(px + 1) * p, ..]);
                let mut row = patches.row_mut(py * side + px);
                for (dst, src) in row.iter_mut().zip(block.iter()) {
                    *dst = *src;
                }
            }
        }
        let patch_tokens = patches.dot(&self.weight) + &self.bias + &self.position.slice(s![1.., ..]);
        let class_token = &self.class_token + &self.position.row(0);
        Ok(TokenSequence {
            class_token,
            patch_tokens,
        })
    }
}
