//! Variational free energies for compressed sensing.
//!
//! Reconstructs a sparse signal `x` from `y = F x + ξ` under a
//! Gauss-Bernoulli prior, either by iterating fixed-point equations
//! (sequential and parallel mean field, iterative thresholding, AMP, GAMP)
//! or by directly minimizing the mean-field or Bethe free energy with a
//! limited-memory quasi-Newton method. A sweep harness maps success rates
//! over the `(ρ, α)` plane.

pub mod denoiser;
pub mod error;
pub mod free_energy;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod quadrature;
pub mod solvers;

pub use denoiser::{ScalarDenoiser, ScalarPosterior};
pub use error::{Error, Result};
pub use free_energy::EnergyReport;
pub use model::{generate_instance, mse, Instance, MatrixScaling, Moments, OutputChannel, PriorParams, VarParams};
pub use solvers::{solve, Algorithm, SolveReport, SolverConfig};
