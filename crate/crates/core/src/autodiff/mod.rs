//! Reverse-mode automatic differentiation on a per-pass tape.
//!
//! A [`Graph`] records every forward operation into a topologically ordered
//! node list (define-by-run; the graph is rebuilt each forward pass).
//! [`Graph::backward`] replays the tape in reverse, accumulating gradients
//! additively across fan-out. All arithmetic is `f64`: the engine is built to
//! survive tight central-difference checks, not to be fast on large models.
//!
//! Gradient correctness is verified by [`grad_check`], which compares the
//! analytic gradient against central finite differences computed from forward
//! evaluations only.

mod check;
mod graph;

pub use check::{grad_check, CheckReport, CoordCheck, CoordStatus};
pub use graph::{Graph, Tensor};

/// Epsilon added to the variance in `layer_norm`; keeps constant inputs
/// well-defined.
pub const LAYER_NORM_EPS: f64 = 1e-5;
