//! Dense linear algebra and reverse-mode differentiation.

pub mod eigen;
pub mod gradcheck;
mod matrix;
pub mod random;
pub mod tape;

pub use eigen::{gram, pinv_from_spectrum, sym_eig, sym_eig_backward, GramSpectrum};
pub use gradcheck::{grad_check, grad_check_many, relative_error};
pub use matrix::Matrix;
pub use tape::{GatherSum, Gradients, NodeId, Tape};
