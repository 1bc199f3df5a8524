//! Estimator families for the linear and nonlinear inverse problem.

pub mod convex;
pub mod linear;
pub mod nonlinear;
