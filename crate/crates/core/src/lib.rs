//! Robust sparse recovery under non-Gaussian noise.
//!
//! The centerpiece is [`npsr::solve`], a coordinate steepest-descent solver for
//!
//! ```text
//! minimize  ‖r − Φs‖_φ + λ‖s‖₁
//! ```
//!
//! where `‖·‖_φ` is the rank pseudo norm of [`scores`]. Because the residual
//! enters only through its ranks, the fit does not depend on the noise
//! distribution, which makes it robust to impulsive and heavy-tailed noise.
//!
//! Alongside it live the usual l2 references ([`baselines::omp`] and
//! [`baselines::lasso_ista`]), synthetic problem generators ([`model`]) and
//! a reproducible Monte-Carlo harness ([`bench`]) with CSV output.

pub mod baselines;
pub mod bench;
pub mod error;
pub mod model;
pub mod npsr;
pub mod scores;

pub use error::{Error, Result};
