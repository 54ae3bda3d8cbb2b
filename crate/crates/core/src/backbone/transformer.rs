//! Pre-norm transformer blocks. Parameters are frozen; `backward` returns the
//! gradient with respect to the block input only.

use ndarray::{s, Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{gelu, gelu_grad, softmax_rows, LayerNorm, LayerNormCache, Linear};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub heads: usize,
    pub ln1: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct BlockCache {
    ln1: LayerNormCache,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    ln2: LayerNormCache,
    hidden_in: Array2<f64>,
}

impl BlockCache {
    /// Sequence length the block was run on.
    pub fn rows(&self) -> usize {
        self.q.nrows()
    }
}

impl Block {
    pub fn new(rng: &mut ChaCha8Rng, width: usize, heads: usize, mlp_hidden: usize) -> Self {
        Self {
            heads,
            ln1: LayerNorm::new(width),
            query: Linear::xavier(rng, width, width),
            key: Linear::xavier(rng, width, width),
            value: Linear::xavier(rng, width, width),
            out: Linear::xavier(rng, width, width),
            ln2: LayerNorm::new(width),
            fc1: Linear::xavier(rng, width, mlp_hidden),
            fc2: Linear::xavier(rng, mlp_hidden, width),
        }
    }

    fn head_dim(&self) -> usize {
        self.query.out_dim() / self.heads
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, BlockCache) {
        let (a, ln1) = self.ln1.forward(x);
        let q = self.query.forward(&a);
        let k = self.key.forward(&a);
        let v = self.value.forward(&a);
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut mixed = Array2::<f64>::zeros(q.raw_dim());
        let mut attn = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows(&mut scores);
            mixed.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            attn.push(scores);
        }
        let x1 = x + &self.out.forward(&mixed);
        let (c, ln2) = self.ln2.forward(&x1);
        let u = self.fc1.forward(&c);
        let g = u.mapv(gelu);
        let y = &x1 + &self.fc2.forward(&g);
        let cache = BlockCache {
            ln1,
            q,
            k,
            v,
            attn,
            ln2,
            hidden_in: u,
        };
        (y, cache)
    }

    pub fn backward(&self, cache: &BlockCache, dy: &Array2<f64>) -> Array2<f64> {
        // MLP branch
        let dg = self.fc2.backward_input(dy);
        let du = &dg * &cache.hidden_in.mapv(gelu_grad);
        let dc = self.fc1.backward_input(&du);
        let dx1 = dy + &self.ln2.backward(&cache.ln2, &dc);

        // attention branch
        let dmixed = self.out.backward_input(&dx1);
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Array2::<f64>::zeros(cache.q.raw_dim());
        let mut dk = Array2::<f64>::zeros(cache.k.raw_dim());
        let mut dv = Array2::<f64>::zeros(cache.v.raw_dim());
        for (h, a) in cache.attn.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let dout = dmixed.slice(cols);
            let da = dout.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&a.t().dot(&dout));
            let row_dot: Array1<f64> = (&da * a).sum_axis(Axis(1));
            let ds = (&da - &row_dot.insert_axis(Axis(1))) * a * scale;
            dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
        }
        let da_in = self.query.backward_input(&dq) + self.key.backward_input(&dk) + self.value.backward_input(&dv);
        dx1 + self.ln1.backward(&cache.ln1, &da_in)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transformer {
    pub blocks: Vec<Block>,
    pub final_norm: LayerNorm,
}

impl Transformer {
    pub fn new(rng: &mut ChaCha8Rng, width: usize, depth: usize, heads: usize, mlp_hidden: usize) -> Self {
        Self {
            blocks: (0..depth).map(|_| Block::new(rng, width, heads, mlp_hidden)).collect(),
            final_norm: LayerNorm::new(width),
        }
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn width(&self) -> usize {
        self.final_norm.gamma.len()
    }
}
