//! Inference of discretely filtered linear operators for the 1D periodic
//! convection equation.
//!
//! A fine-grid simulation `du/dt = A u` is filtered with a non-uniform
//! kernel filter `ū = W u` onto a coarse grid. The crate builds coarse
//! operators `Ā` such that `dū/dt ≈ Ā ū` along three routes:
//!
//! - intrusive: `Ā = W A R` with a ridge reconstruction `R` ([`inference::fit_reconstruction`]),
//! - derivative fitting: least squares on filtered states and time derivatives
//!   ([`inference::fit_derivative`]),
//! - embedded: stochastic gradient descent through a differentiable RK4 solve
//!   ([`inference::fit_embedded`], gradients from [`adjoint`]).
//!
//! Data generation lives in [`dns`], evaluation and sweeps in [`eval`], and
//! file formats plus the command line in [`cli`].
//!
//! With the `parallel` feature (default) the data-parallel loops (dataset
//! generation, filter rows, batch gradients, grid searches) run on rayon;
//! without it the same loops run sequentially and produce identical results.

pub mod adjoint;
pub mod cli;
pub mod dns;
pub mod error;
pub mod eval;
pub mod filterbank;
pub mod inference;
pub mod linalg;
pub mod par;
pub mod stencils;

pub use error::{Error, Result};
