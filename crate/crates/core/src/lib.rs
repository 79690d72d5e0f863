//! Desk-scale laboratory for feature distillation through a learned projector.
//!
//! * [`linalg`]: dense matrices, Jacobi SVD, correlation, seeded RNG.
//! * [`kdcore`]: normalization, projector, distances and their gradients.
//! * [`dynamics`]: projector update rule, fixed points, spectra, low-rank loss.
//! * [`equivariance`]: translation operators and the equivariance measure.
//! * [`trainlab`]: teacher/student toy experiments.

// `!(x >= 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod equivariance;
pub mod error;
pub mod gradcheck;
pub mod kdcore;
pub mod linalg;
pub mod trainlab;

pub use error::{LabError, Result};
