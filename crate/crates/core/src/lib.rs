//! Matrix-free empirical Bayes hyperparameter estimation for linear-Gaussian
//! inverse problems.
//!
//! The forward model is `d = A s + eta` with `eta ~ N(0, R(theta))` and prior
//! `s ~ N(mu, Q(theta))`. Hyperparameters `theta` are estimated by minimizing
//! the negative log marginal posterior
//!
//! ```text
//! F(theta) = -log pi(theta) + 1/2 logdet Z + 1/2 ||A mu - d||^2_{Z^-1},   Z = A Q A^T + R
//! ```
//!
//! either exactly (dense, small problems) or through a low-rank surrogate
//! built from a generalized Golub-Kahan bidiagonalization that only needs
//! products with `A`, `A^T`, `Q` and `R^-1`.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod covariance;
pub mod estimate;
pub mod error;
pub mod gengk;
mod fft;
mod linalg;
pub mod marginal;
pub mod monitor;
pub mod operators;
pub mod problems;

pub use error::{Error, Result};
