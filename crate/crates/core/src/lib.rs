//! Clinical-relevance weighted multimodal preference optimization.
//!
//! The crate curates preference pairs from medical question/answer samples
//! (hallucinated answers and lesion-noised images), scores the clinical
//! relevance of each pair with an agent consensus protocol or a visual
//! detector's confidence, normalizes the scores into sample weights, and
//! trains a small image-conditioned policy with a weighted DPO objective.

// `!(a < b)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agents;
pub mod curation;
pub mod dataset;
pub mod dpo;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod noising;
pub mod normalize;
pub mod pair;
pub mod pipeline;
pub mod policy;
pub mod relevance;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
