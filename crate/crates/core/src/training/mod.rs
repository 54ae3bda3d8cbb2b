//! Two-pass training: fit the style space over the training queries, then
//! optimise the prompt projections (and head / text tower) with a triplet
//! loss on cosine distance.

mod optim;
mod trainer;

pub use optim::{Adam, LrSchedule};
pub use trainer::{
    batch_objective, fit_style_space, prepare_training, train_two_pass, EpochLog, PassOne, PreparedQuery, PreparedSet,
    TrainEvent, TrainOutcome,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Embedding;
use crate::data::ManifestRecord;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Triplet margin `alpha`.
    pub margin: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    /// Number of style bases.
    pub k: usize,
    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,
    /// Whether the head after the frozen transformer is updated.
    pub train_head: bool,
    /// Whether the text tower is updated.
    pub train_text: bool,
}

impl Default for TrainConfig {
    /// The published schedule: batch 24, 20 epochs, lr 1e-5, margin 1.0, k = 4.
    fn default() -> Self {
        Self {
            batch_size: 24,
            learning_rate: 1e-5,
            epochs: 20,
            margin: 1.0,
            warmup_epochs: 1,
            seed: 0,
            k: 4,
            kmeans_max_iter: 100,
            kmeans_tol: 1e-9,
            train_head: true,
            train_text: true,
        }
    }
}

impl TrainConfig {
    /// Same schedule with a learning rate suited to randomly initialised
    /// desk-scale towers.
    pub fn desk() -> Self {
        Self {
            learning_rate: 3e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(self.margin > 0.0) {
            return Err(Error::Config("margin must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Anchor query (index into the record list) with positive and negative gallery ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: String,
    pub negative: String,
}

/// `1 - cos(x, y)`, in `[0, 2]`.
pub fn cosine_distance(x: &Embedding, y: &Embedding) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::Shape(format!("dimensions {} and {} differ", x.dim(), y.dim())));
    }
    let (nx, ny) = (norm(&x.vector), norm(&y.vector));
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::DegenerateInput("cosine distance of a zero vector".into()));
    }
    let cos = (dot(&x.vector, &y.vector) / (nx * ny)).clamp(-1.0, 1.0);
    Ok(1.0 - cos)
}

/// Mean hinge `max(0, d(F,P) - d(F,N) + alpha)` over the batch.
pub fn triplet_loss(anchors: &[Embedding], positives: &[Embedding], negatives: &[Embedding], margin: f64) -> Result<f64> {
    if anchors.len() != positives.len() || anchors.len() != negatives.len() {
        return Err(Error::Batch(format!(
            "batch lengths differ: {} anchors, {} positives, {} negatives",
            anchors.len(),
            positives.len(),
            negatives.len()
        )));
    }
    if anchors.is_empty() {
        return Err(Error::Batch("empty batch".into()));
    }
    let mut total = 0.0;
    for ((f, p), n) in anchors.iter().zip(positives).zip(negatives) {
        total += hinge(cosine_distance(f, p)?, cosine_distance(f, n)?, margin);
    }
    Ok(total / anchors.len() as f64)
}

pub fn hinge(d_pos: f64, d_neg: f64, margin: f64) -> f64 {
    (d_pos - d_neg + margin).max(0.0)
}

/// Positive is the anchor's own gallery image; the negative is drawn
/// uniformly from the other gallery images that have a query of the same style.
pub fn sample_triplet<R: Rng>(anchor: usize, records: &[ManifestRecord], rng: &mut R) -> Result<Triplet> {
    let query = records
        .get(anchor)
        .ok_or_else(|| Error::Sampling(format!("anchor index {anchor} out of range")))?;
    let candidates: Vec<&str> = records
        .iter()
        .filter(|r| r.style == query.style && r.gallery_id != query.gallery_id)
        .map(|r| r.gallery_id.as_str())
        .collect();
    if candidates.is_empty() {
        return Err(Error::Sampling(format!(
            "{} style set has no negative for {}",
            query.style, query.gallery_id
        )));
    }
    let negative = candidates[rng.gen_range(0..candidates.len())].to_string();
    Ok(Triplet {
        anchor,
        positive: query.gallery_id.clone(),
        negative,
    })
}
