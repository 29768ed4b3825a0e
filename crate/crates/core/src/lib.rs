//! Hybrid-domain adaptive representation learning for gaze estimation.
//!
//! - [`numerics`]: dense matrices, a reverse-mode tape, Jacobi eigensolver
//!   with its backward rule, spectral pseudo-inverse, finite-difference checks.
//! - [`uda`]: subspace alignment loss between two feature batches, built from
//!   the pseudo-inverse Gram matrices (angle term) and their spectra (scale term).
//! - [`sgf`]: sparse graph fusion of binocular gaze features with pose features.
//! - [`model`]: the dual-branch network, joint loss and SGD.
//! - [`synth`]: a procedural hybrid-domain gaze world.

// Negated comparisons are how inputs reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod sgf;
pub mod synth;
pub mod uda;

pub use error::{Error, Result};
pub use numerics::Matrix;
