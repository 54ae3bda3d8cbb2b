//! Style-diversified query-based image retrieval.
//!
//! A frozen backbone encodes gallery images and queries (text, sketch, art,
//! low resolution). Gram matrices of early conv features are clustered into
//! a small style space; each query's style feature is projected into prompt
//! tokens inserted at every transformer layer. Only the prompt projections
//! (plus the output head and text tower) are trained, with a triplet loss.

pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod prompt_encoder;
pub mod retrieval;
pub mod style;
pub mod training;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use model::{Checkpoint, RetrievalModel};
