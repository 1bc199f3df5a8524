//! Estimators for statistical inverse learning with random design, exercised
//! on a synthetic diagonal testbed with controllable ill-posedness.
//!
//! The crate provides:
//!
//! * [`linalg`] — the dense symmetric kernel everything else is built on;
//! * [`testbed`] — the synthetic spectral problem, data sampling and
//!   ground-truth oracles;
//! * [`filters`] — spectral regularization filters with an axiom auditor;
//! * [`estimators`] — linear (spectral, Hilbert-scale, projection), convex
//!   (Besov-penalty proximal gradient) and nonlinear (Levenberg-Marquardt
//!   Tikhonov) estimators;
//! * [`select`] — a-priori and data-driven regularization parameter choices;
//! * [`pkpd`] — the two-compartment pharmacokinetic covariate-model
//!   application;
//! * [`sweep`] — the Monte Carlo harness that sweeps sample sizes, fits
//!   log-log slopes and renders verdicts against theoretical exponents.

pub mod estimators;
pub mod filters;
pub mod linalg;
pub mod pkpd;
pub mod select;
pub mod sweep;
pub mod testbed;

pub use estimators::convex::{ConvexSolveReport, PenaltySpec};
pub use estimators::nonlinear::{ForwardModel, NlSolveReport};
pub use filters::{FilterAudit, SpectralFilter};
pub use linalg::{EigenDecomposition, SymMatrix};
pub use sweep::{ExperimentConfig, SweepResult};
pub use testbed::{Dataset, Estimate, HilbertScaleSpec, SpectralProblem};
