//! Disentangled deep generative priors for Bayesian elliptic-PDE inverse problems.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] / [`tape`]: dense f64 arrays and a small reverse-mode
//!   autodiff engine, enough to train the generative models.
//! - [`linalg`]: dense helpers (Cholesky, Jacobi eigen, thin QR) used by the
//!   GP machinery and the diagnostics.
//! - [`pde`]: finite-difference forward models for the two elliptic problems,
//!   the observation operator, the Gaussian misfit, and its adjoint gradient.
//! - [`gp`]: anisotropic squared-exponential GP sampling in whitened
//!   coordinates plus the GP-Fixed / GP-Hier baseline log-posteriors.
//! - [`data`]: training corpus generation and label standardization.
//! - [`penalty`]: polynomial-lift correlation penalties (R0/R1) in both
//!   exact (diagnostic) and smoothed (training) forms.
//! - [`model`]: Aux-VAE / plain-VAE definition, losses, and the training loop.
//! - [`infer`]: latent-space posteriors, MAP estimation, HMC and NUTS with
//!   dual averaging and two-phase mass adaptation, GP baseline samplers.
//! - [`diag`]: ESS, field/parameter recovery metrics, generator-overlap and
//!   cross-sensitivity diagnostics, and the linearization theory checks.
//! - [`io`]: file formats (checkpoints, datasets, chains, fields, observations).
//! - [`pipeline`]: end-to-end experiment orchestration shared by the CLI and
//!   the test suite.

pub mod data;
pub mod diag;
pub mod gp;
pub mod infer;
pub mod io;
pub mod linalg;
pub mod model;
pub mod pde;
pub mod penalty;
pub mod pipeline;
pub mod tape;
pub mod tensor;

mod error;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
