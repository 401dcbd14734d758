//! Critical primitive multi-type branching processes with immigration.
//!
//! The crate covers the full pipeline from a discrete branching model to its
//! diffusion limit:
//!
//! * [`perron`] — primitivity tests, Perron eigenpairs, the limit projector
//!   `Π = u vᵀ` and geometric convergence-rate constants for nonnegative
//!   matrices.
//! * [`model`] — offspring/immigration laws, their analytic means and
//!   covariances, criticality classification, and the drift/diffusion
//!   coefficients `b = vᵀ m_ε`, `c = vᵀ (u ⊙ V_ξ) v` of the limit SDE.
//! * [`moments`] — closed-form first and second moments of the branching
//!   recursion plus an exact enumeration oracle for tiny models.
//! * [`simulator`] — reproducible Monte Carlo of the branching recursion,
//!   martingale decomposition, scaled step processes and the `Ψₙ`
//!   reconstruction map.
//! * [`sde`] — Euler full-truncation integration of the scalar CIR equation
//!   and of the p-dimensional martingale limit via its (P, Q) system.
//! * [`harness`] — end-to-end statistical verification: ray concentration,
//!   Kolmogorov–Smirnov marginal comparisons and proof-side condition
//!   diagnostics, aggregated into a serializable report.
//! * [`config`] — the JSON model-config schema shared with the CLI.

pub mod config;
pub mod harness;
pub mod model;
pub mod moments;
pub mod perron;
pub mod presets;
pub mod rng;
pub mod sde;
pub mod simulator;
pub mod stats;

pub use model::{BranchingModel, Criticality, DiscreteLaw, LimitCoefficients};
pub use perron::PerronData;
