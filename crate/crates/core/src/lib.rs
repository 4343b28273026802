//! Numerical laboratory for the stochastic maximum principle of a controlled
//! stochastic heat equation on (0, 1) with Dirichlet boundary conditions.
//!
//! The crate is organised bottom-up:
//!
//! * [`spectral`]: sine-basis calculus for the Dirichlet Laplacian.
//! * [`stochastics`]: Wiener increments, path branching, seed derivation and
//!   the `L^p` stochastic-integral inequality harness.
//! * [`model`], [`control`], [`engine`]: controlled state equation, linear
//!   SPDE template and cost estimation.
//! * [`variation`]: spike perturbations and first/second variation processes.
//! * [`adjoint`]: first adjoint BSDE and the second adjoint bilinear form.
//! * [`smp`]: Hamiltonian, maximum-principle statistic and rate fits.

pub mod adjoint;
pub mod control;
pub mod engine;
pub mod error;
pub mod model;
pub mod regression;
pub mod smp;
pub mod spectral;
pub mod stats;
pub mod stochastics;
pub mod variation;

pub use error::{Error, Result};
