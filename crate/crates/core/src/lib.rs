//! Custom keyword spotting trained with per-phoneme contrastive alignment.
//!
//! The crate trains small audio and text encoders whose per-phoneme
//! embeddings are aligned with InfoNCE, keeps a momentum memory bank of
//! phoneme prototypes, synthesizes confusable negatives by phoneme edits,
//! and verifies a query against text, audio, or combined enrollment.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod alignment;
pub mod augmentation;
pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod corpus;
pub mod dataset;
pub mod encoders;
pub mod enrollment;
pub mod eval;
pub mod memory_bank;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod oracles;
pub mod splits;
pub mod train;
pub mod verifier;

pub use error::{Error, Result};
