//! Tri-modal video-language pre-training at desk scale.
//!
//! The crate bundles a small reverse-mode autodiff [`substrate`], a three-encoder
//! model ([`encoders`]), masked-view construction ([`masking`]), the alignment,
//! ranking and focal MLM objectives with scalar reference implementations
//! ([`losses`]), a synthetic paired corpus ([`data`]), pre-training and
//! fine-tuning loops ([`training`]) and retrieval/VQA metrics ([`evaluation`]).

pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod masking;
pub mod substrate;
pub mod training;

pub use error::{CloverError, Result};
