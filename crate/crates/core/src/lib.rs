//! Two-stage visual-semantic embedding at desk scale.
//!
//! Stage 1 pretrains an image encoder and a dense-text encoder with a
//! hardest-negative triplet loss. Stage 2 freezes the dense encoder as a
//! teacher and fine-tunes a sparse-text branch — encoder plus mask-token
//! reconstruction decoder — with joint alignment and dense-to-sparse
//! distillation objectives. A deterministic synthetic corpus supplies
//! image/dense-text/sparse-text triples, and a retrieval harness scores
//! R@1/5/10 in both directions.
//!
//! Everything runs on the crate's own `f64` reverse-mode autodiff engine;
//! see [`autodiff`].

pub mod autodiff;
pub mod corpus;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod params;
pub mod selfcheck;
pub mod trainer;
mod transformer;

pub use error::{Error, Result};
