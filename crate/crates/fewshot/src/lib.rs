//! Desk-scale cross-domain few-shot classification.
//!
//! The framework trains a convolutional feature extractor with an MLP
//! projector inserted between the extractor and the classifier. The
//! projector is present in every training-time loss and removed at
//! evaluation time, where episodes are solved on raw extractor features.
//! Three training paradigms are provided (non-episodic pretraining,
//! bilevel meta-learning, prototype-based metric learning) together with
//! the diagnostics that measure why the projector helps: feature
//! distribution KL divergence and cluster compactness.

pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod paradigms;
pub mod rng;
pub mod scalar;

pub use error::{Error, Result};
