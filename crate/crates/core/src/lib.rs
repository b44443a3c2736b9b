//! Feedback-reciprocal graph collaborative filtering.
//!
//! Interactions are split by explicit feedback into an interacted-and-
//! fascinated (I&F) graph and an interacted-but-unfascinated (I&U) graph.
//! Each view gets its own LightGCN-style propagation; the two are tied by
//! a reciprocal contrastive term, a centroid-based macro term and a
//! divergence regularizer. Only the I&F view scores recommendations.

pub mod contrastive;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod frcl;
pub mod macrofm;
pub mod objective;
pub mod propagation;
pub mod sparse;
pub mod trainer;

pub use error::{Error, Result};
