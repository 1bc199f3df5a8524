//! Spectral regularization filters: truncated SVD, iterated Tikhonov and
//! Landweber (gradient descent), together with matrix-function application
//! and a grid auditor for the defining filter axioms.

use crate::linalg::{sym_eigendecompose, LinalgError, SymMatrix};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("spectral argument t = {t} outside [0, {t_max}]")]
    OutOfDomain { t: f64, t_max: f64 },
    #[error("Landweber step size {eta} outside (0, 1/t_max] with t_max = {t_max}")]
    InvalidStepSize { eta: f64, t_max: f64 },
    #[error("iterated Tikhonov with l = {l} has qualification {l}, cannot audit q = {q}")]
    QualificationTooHigh { l: u32, q: f64 },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FilterKind {
    /// Spectral cut-off at `lambda`.
    Tsvd,
    /// `l`-times iterated ridge; `l = 1` is plain Tikhonov.
    IteratedTikhonov { l: u32 },
    /// Gradient descent with step `eta`; iteration count is derived from
    /// `lambda` as `u = ceil(1 / (eta * lambda))`.
    Landweber { eta: f64 },
}

/// A filter family `g_lambda` together with its certified constants.
///
/// `d`, `e`, `gamma0` bound `|t g(t)|`, `lambda |g(t)|` and the residual
/// `|1 - t g(t)|`; `gamma_q` bounds `|r(t)| t^q / lambda^q` at the declared
/// qualification order `q`. [`verify_filter_axioms`] checks all four on a
/// grid.
#[derive(Debug, Clone)]
pub struct SpectralFilter {
    pub kind: FilterKind,
    pub d: f64,
    pub e: f64,
    pub gamma0: f64,
    pub q: f64,
    pub gamma_q: f64,
    /// Upper end of the spectral domain (the kernel bound `kappa^2`).
    pub t_max: f64,
}

impl SpectralFilter {
    pub fn tsvd(t_max: f64) -> Self {
        Self {
            kind: FilterKind::Tsvd,
            d: 1.0,
            e: 1.0,
            gamma0: 1.0,
            q: 1.0,
            gamma_q: 1.0,
            t_max,
        }
    }

    pub fn tikhonov(l: u32, t_max: f64) -> Self {
        assert!(l >= 1, "iteration count must be at least 1");
        Self {
            kind: FilterKind::IteratedTikhonov { l },
            d: 1.0,
            e: l as f64,
            gamma0: 1.0,
            q: l as f64,
            gamma_q: 1.0,
            t_max,
        }
    }

    pub fn landweber(eta: f64, t_max: f64) -> Result<Self, FilterError> {
        if !(eta > 0.0 && eta * t_max <= 1.0 + 1e-12) {
            return Err(FilterError::InvalidStepSize { eta, t_max });
        }
        Ok(Self {
            kind: FilterKind::Landweber { eta },
            d: 1.0,
            // The ceil in the iteration count makes the effective lambda at
            // most the requested one, so lambda*g(0) can reach 1 + eta*lambda.
            e: 1.0 + eta * t_max,
            gamma0: 1.0,
            q: 1.0,
            gamma_q: 1.0,
            t_max,
        })
    }

    /// Re-declares the qualification order and its constant.
    ///
    /// TSVD has `gamma_q = 1` for every order; Landweber has `gamma_q = 1`
    /// for `q <= 1` and `q^q` beyond; iterated Tikhonov saturates at `q = l`.
    pub fn with_qualification(mut self, q: f64) -> Result<Self, FilterError> {
        assert!(q > 0.0);
        self.gamma_q = match self.kind {
            FilterKind::Tsvd => 1.0,
            FilterKind::IteratedTikhonov { l } => {
                if q > l as f64 {
                    return Err(FilterError::QualificationTooHigh { l, q });
                }
                1.0
            }
            FilterKind::Landweber { .. } => {
                if q <= 1.0 {
                    1.0
                } else {
                    q.powf(q)
                }
            }
        };
        self.q = q;
        Ok(self)
    }

    fn landweber_iterations(eta: f64, lambda: f64) -> f64 {
        (1.0 / (eta * lambda)).ceil().max(1.0)
    }
}

/// Evaluates `g_lambda(t)`.
pub fn eval_filter(filter: &SpectralFilter, lambda: f64, t: f64) -> Result<f64, FilterError> {
    assert!(lambda > 0.0, "regularization parameter must be positive");
    if t < 0.0 || t > filter.t_max {
        return Err(FilterError::OutOfDomain { t, t_max: filter.t_max });
    }
    Ok(eval_unchecked(filter, lambda, t))
}

fn eval_unchecked(filter: &SpectralFilter, lambda: f64, t: f64) -> f64 {
    match filter.kind {
        FilterKind::Tsvd => {
            if t >= lambda {
                1.0 / t
            } else {
                0.0
            }
        }
        FilterKind::IteratedTikhonov { l } => {
            // Sum form of (1/t)(1 - (lambda/(lambda+t))^l); exact at t = 0
            // where it reduces to l/lambda.
            let base = 1.0 / (lambda + t);
            let ratio = lambda * base;
            let mut term = base;
            let mut acc = term;
            for _ in 1..l {
                term *= ratio;
                acc += term;
            }
            acc
        }
        FilterKind::Landweber { eta } => {
            let u = SpectralFilter::landweber_iterations(eta, lambda);
            if t == 0.0 {
                return eta * u;
            }
            // (1 - (1 - eta t)^u) / t via expm1 to avoid cancellation.
            let log_base = (-eta * t).ln_1p();
            -(u * log_base).exp_m1() / t
        }
    }
}

/// Residual `r_lambda(t) = 1 - t g_lambda(t)` in closed form.
pub fn residual(filter: &SpectralFilter, lambda: f64, t: f64) -> Result<f64, FilterError> {
    if t < 0.0 || t > filter.t_max {
        return Err(FilterError::OutOfDomain { t, t_max: filter.t_max });
    }
    Ok(match filter.kind {
        FilterKind::Tsvd => {
            if t >= lambda {
                0.0
            } else {
                1.0
            }
        }
        FilterKind::IteratedTikhonov { l } => (lambda / (lambda + t)).powi(l as i32),
        FilterKind::Landweber { eta } => {
            let u = SpectralFilter::landweber_iterations(eta, lambda);
            (u * (-eta * t).ln_1p()).exp()
        }
    })
}

/// Applies `V diag(g_lambda(w)) V'` to `v`, where `M = V diag(w) V'`.
///
/// Eigenvalues within roundoff below zero are clamped to the domain.
pub fn apply_filter(
    filter: &SpectralFilter,
    lambda: f64,
    m: &SymMatrix,
    v: &[f64],
) -> Result<Vec<f64>, FilterError> {
    let eig = sym_eigendecompose(m)?;
    apply_filter_to_eig(filter, lambda, &eig, v)
}

/// [`apply_filter`] with a precomputed eigendecomposition, for grid sweeps
/// that reuse one factorization across many `lambda`.
pub fn apply_filter_to_eig(
    filter: &SpectralFilter,
    lambda: f64,
    eig: &crate::linalg::EigenDecomposition,
    v: &[f64],
) -> Result<Vec<f64>, FilterError> {
    let w_max = eig.eigenvalues.first().copied().unwrap_or(0.0);
    let slack = 1e-9 * (1.0 + w_max.abs());
    let mut coeffs = eig.to_eigenbasis(v);
    for (c, &w) in coeffs.iter_mut().zip(&eig.eigenvalues) {
        let w_clamped = w.clamp(0.0, filter.t_max);
        if w < -slack || w > filter.t_max + slack {
            return Err(FilterError::OutOfDomain { t: w, t_max: filter.t_max });
        }
        *c *= eval_unchecked(filter, lambda, w_clamped);
    }
    Ok(eig.from_eigenbasis(&coeffs))
}

/// Grid maxima of the four filter-axiom quantities, compared against the
/// declared constants with `1e-9` absolute slack.
#[derive(Debug, Clone, Serialize)]
pub struct FilterAudit {
    pub sup_t_g: f64,
    pub sup_lambda_g: f64,
    pub sup_residual: f64,
    pub sup_residual_tq: f64,
    pub d_ok: bool,
    pub e_ok: bool,
    pub gamma0_ok: bool,
    pub gamma_q_ok: bool,
    pub pass: bool,
}

pub const AUDIT_SLACK: f64 = 1e-9;

/// Evaluates the filter axioms over `lambda_grid x t_grid`.
///
/// Grid maxima cannot exceed the true suprema, so the slack only guards
/// rounding in the comparisons.
pub fn verify_filter_axioms(
    filter: &SpectralFilter,
    lambda_grid: &[f64],
    t_grid: &[f64],
) -> FilterAudit {
    assert!(!lambda_grid.is_empty() && !t_grid.is_empty(), "grids must be nonempty");
    let mut sup_t_g: f64 = 0.0;
    let mut sup_lambda_g: f64 = 0.0;
    let mut sup_residual: f64 = 0.0;
    let mut sup_residual_tq: f64 = 0.0;
    for &lambda in lambda_grid {
        assert!(lambda > 0.0);
        for &t in t_grid {
            let g = eval_filter(filter, lambda, t).expect("t grid within domain");
            let r = residual(filter, lambda, t).expect("t grid within domain");
            sup_t_g = sup_t_g.max((t * g).abs());
            sup_lambda_g = sup_lambda_g.max((lambda * g).abs());
            sup_residual = sup_residual.max(r.abs());
            sup_residual_tq = sup_residual_tq.max(r.abs() * (t / lambda).powf(filter.q));
        }
    }
    let d_ok = sup_t_g <= filter.d + AUDIT_SLACK;
    let e_ok = sup_lambda_g <= filter.e + AUDIT_SLACK;
    let gamma0_ok = sup_residual <= filter.gamma0 + AUDIT_SLACK;
    let gamma_q_ok = sup_residual_tq <= filter.gamma_q + AUDIT_SLACK;
    FilterAudit {
        sup_t_g,
        sup_lambda_g,
        sup_residual,
        sup_residual_tq,
        d_ok,
        e_ok,
        gamma0_ok,
        gamma_q_ok,
        pass: d_ok && e_ok && gamma0_ok && gamma_q_ok,
    }
}

/// Filter description as it appears in experiment configuration files.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FilterSpec {
    Tsvd,
    Tikhonov {
        #[serde(default = "default_l")]
        l: u32,
    },
    Landweber {
        /// Step size; defaults to `1 / kappa^2` when omitted.
        #[serde(default)]
        eta: Option<f64>,
    },
}

fn default_l() -> u32 {
    1
}

impl FilterSpec {
    pub fn build(&self, t_max: f64) -> Result<SpectralFilter, FilterError> {
        match self {
            FilterSpec::Tsvd => Ok(SpectralFilter::tsvd(t_max)),
            FilterSpec::Tikhonov { l } => Ok(SpectralFilter::tikhonov(*l, t_max)),
            FilterSpec::Landweber { eta } => {
                SpectralFilter::landweber(eta.unwrap_or(1.0 / t_max), t_max)
            }
        }
    }
}
