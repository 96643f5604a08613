//! Kernel-based estimation for the partially functional linear model.
//!
//! The response is modelled as `Y = <X, f> + Z'gamma + eps` where `X` is a
//! curve on `[0, 1]`, `f` lives in a reproducing kernel Hilbert space and
//! `gamma` is a sparse coefficient vector. The estimator combines a squared
//! RKHS-norm penalty on `f` with an l1 penalty on `gamma`; the representer
//! coefficients can be compressed with a random `m x n` sketch so the
//! alternating solver only ever factors an `m x m` system.
//!
//! Module layout:
//!
//! * [`funcdata`]: quadrature grids, datasets and their on-disk format.
//! * [`kernel`]: kernel evaluation, basis functions and the cross-kernel matrix.
//! * [`sketch`]: GRS / ROS / SUB sketches and statistical-dimension tools.
//! * [`solver`]: the alternating proximal solver and prediction.
//! * [`simgen`]: the two synthetic benchmark generators.
//! * [`tuning`]: k-fold cross-validation over `(mu^2, lambda)`.
//! * [`eval`]: error metrics and the replicate benchmark harness.
//! * [`cli`]: the `pflm` command-line front end.

pub mod cli;
pub mod error;
pub mod eval;
pub mod funcdata;
pub mod kernel;
pub mod rng;
pub mod simgen;
pub mod sketch;
pub mod solver;
pub mod tuning;

pub use error::{Error, Result};
