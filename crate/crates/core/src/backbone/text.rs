use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Embedding;
use crate::error::{Error, Result};
use crate::linalg::{norm, normalize_backward, uniform_matrix};
use crate::nn::Linear;

pub const UNK_TOKEN: &str = "<unk>";

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Mean of token embeddings followed by one linear layer and L2 normalisation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncoder {
    pub vocab: BTreeMap<String, usize>,
    /// `vocab_size x d`; row 0 is the unknown token.
    pub embeddings: Array2<f64>,
    pub projection: Linear,
}

#[derive(Clone, Debug)]
pub struct TextTrace {
    ids: Vec<usize>,
    mean: Array1<f64>,
    z_norm: f64,
    unit: Vec<f64>,
}

impl TextEncoder {
    /// Builds the vocabulary from `corpus` (sorted, deduplicated).
    pub fn new<'a>(rng: &mut ChaCha8Rng, corpus: impl IntoIterator<Item = &'a str>, dim: usize) -> Self {
        let mut words: Vec<String> = corpus.into_iter().flat_map(tokenize).collect();
        words.sort();
        words.dedup();
        let mut vocab = BTreeMap::new();
        vocab.insert(UNK_TOKEN.to_string(), 0);
        for w in words {
            let next = vocab.len();
            vocab.entry(w).or_insert(next);
        }
        let embeddings = uniform_matrix(rng, vocab.len(), dim, 1.0);
        Self {
            vocab,
            embeddings,
            projection: Linear::xavier(rng, dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn token_ids(&self, text: &str) -> Result<Vec<usize>> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::EmptyQuery);
        }
        let mut ids: Vec<usize> = tokens
            .iter()
            .map(|t| self.vocab.get(t).copied().unwrap_or(0))
            .collect();
        // summation order must not depend on word order
        ids.sort_unstable();
        Ok(ids)
    }

    pub fn encode_text(&self, text: &str) -> Result<Embedding> {
        let ids = self.token_ids(text)?;
        self.forward_ids(&ids).map(|(e, _)| e)
    }

    pub fn forward_ids(&self, ids: &[usize]) -> Result<(Embedding, TextTrace)> {
        if ids.is_empty() {
            return Err(Error::EmptyQuery);
        }
        let mut mean = Array1::<f64>::zeros(self.dim());
        for &id in ids {
            mean += &self.embeddings.row(id);
        }
        mean /= ids.len() as f64;
        let z = self.projection.forward_vec(&mean);
        let z_norm = norm(z.as_slice().expect("contiguous"));
        let emb = Embedding::unit(z.to_vec())?;
        let trace = TextTrace {
            ids: ids.to_vec(),
            mean,
            z_norm,
            unit: emb.vector.clone(),
        };
        Ok((emb, trace))
    }

    /// Accumulates parameter gradients of the unit output into `grad`.
    pub fn backward(&self, trace: &TextTrace, d_unit: &[f64], grad: &mut TextEncoder) {
        let dz = Array1::from(normalize_backward(&trace.unit, trace.z_norm, d_unit));
        self.projection.accumulate_grad_vec(&trace.mean, &dz, &mut grad.projection);
        let dmean = self.projection.backward_input_vec(&dz) / trace.ids.len() as f64;
        for &id in &trace.ids {
            let mut row = grad.embeddings.row_mut(id);
            row += &dmean;
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            vocab: self.vocab.clone(),
            embeddings: Array2::zeros(self.embeddings.raw_dim()),
            projection: self.projection.zeros_like(),
        }
    }
}
