use ndarray::{Array1, Array2, Array3};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::FeatureMap;
use crate::error::{Error, Result};
use crate::linalg::uniform_matrix;

/// 3x3 convolution, stride 1, edge-replicate padding, followed by ReLU.
///
/// Replicate padding keeps a spatially constant input constant at the borders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    /// `(9 * in_channels) x out_channels`, rows ordered `(dy, dx, c_in)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ConvLayer {
    /// He-uniform weights with the spatial mean of every `(c_in, c_out)`
    /// filter removed, so flat regions produce no response and the features
    /// follow local structure (edges, texture) rather than intensity.
    pub fn he(rng: &mut ChaCha8Rng, in_channels: usize, out_channels: usize) -> Self {
        let fan_in = 9 * in_channels;
        let bound = (6.0 / fan_in as f64).sqrt();
        let mut weight = uniform_matrix(rng, fan_in, out_channels, bound);
        for co in 0..out_channels {
            for ci in 0..in_channels {
                let mean = (0..9).map(|t| weight[[t * in_channels + ci, co]]).sum::<f64>() / 9.0;
                for t in 0..9 {
                    weight[[t * in_channels + ci, co]] -= mean;
                }
            }
        }
        Self {
            weight,
            bias: Array1::zeros(out_channels),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.nrows() / 9
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (h, w, c) = x.dim();
        let hi = h as isize - 1;
        let wi = w as isize - 1;
        let mut cols = Array2::<f64>::zeros((h * w, 9 * c));
        for y in 0..h {
            for xx in 0..w {
                let mut row = cols.row_mut(y * w + xx);
                let mut k = 0;
                for dy in -1isize..=1 {
                    let sy = (y as isize + dy).clamp(0, hi) as usize;
                    for dx in -1isize..=1 {
                        let sx = (xx as isize + dx).clamp(0, wi) as usize;
                        for ci in 0..c {
                            row[k] = x[[sy, sx, ci]];
                            k += 1;
                        }
                    }
                }
            }
        }
        let mut out = cols.dot(&self.weight) + &self.bias;
        out.mapv_inplace(|v| v.max(0.0));
        let cout = self.weight.ncols();
        out.into_shape_with_order((h, w, cout)).expect("conv output reshape")
    }
}

fn max_pool2(x: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = x.dim();
    Array3::from_shape_fn((h / 2, w / 2, c), |(y, xx, ci)| {
        let a = x[[2 * y, 2 * xx, ci]];
        let b = x[[2 * y, 2 * xx + 1, ci]];
        let d = x[[2 * y + 1, 2 * xx, ci]];
        let e = x[[2 * y + 1, 2 * xx + 1, ci]];
        a.max(b).max(d).max(e)
    })
}

/// VGG-style stem: conv, conv, 2x2 max-pool, conv. The third conv's output is
/// the style feature map (`S/2 x S/2 x C`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvExtractor {
    pub layers: [ConvLayer; 3],
}

impl ConvExtractor {
    pub fn new(rng: &mut ChaCha8Rng, hidden: usize, out_channels: usize) -> Self {
        Self {
            layers: [
                ConvLayer::he(rng, 3, hidden),
                ConvLayer::he(rng, hidden, hidden),
                ConvLayer::he(rng, hidden, out_channels),
            ],
        }
    }

    pub fn forward(&self, image: &Array3<f64>) -> Result<FeatureMap> {
        let (h, w, c) = image.dim();
        if c != self.layers[0].in_channels() {
            return Err(Error::InputShape(format!("expected 3 channels, got {c}")));
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InputShape(format!("image side must be even, got {h}x{w}")));
        }
        let x = self.layers[0].forward(image);
        let x = self.layers[1].forward(&x);
        let x = max_pool2(&x);
        let x = self.layers[2].forward(&x);
        FeatureMap::new(x, "conv3")
    }
}
