//! Monte Carlo convergence-rate harness: sweeps the sample size with
//! theory-prescribed tuning, aggregates replicate errors, fits log-log
//! slopes and renders verdicts against theoretical exponents; also runs the
//! fixed-m adaptivity experiments for the data-driven selection rules.

use crate::estimators::convex::{
    bregman_distance, convex_estimate_with, matched_besov_source, ConvexLambdaRule,
    ConvexOptions, PenaltySpec, WeightFamily,
};
use crate::estimators::linear::{
    hilbert_scale_estimate_with, projection_estimate, SpectralDesign,
};
use crate::filters::{FilterSpec, SpectralFilter};
use crate::select::{
    apriori_lambda, apriori_lambda_hs, apriori_n_projection, estimate_noise_holdout,
    holdout_select, lepskii_select, HsCase, LambdaGrid, SampleErrorProxy, SelectError,
};
use crate::testbed::{
    build_projection_problem, build_spectral_problem, h_norm_error, make_hilbert_scale,
    sample_dataset, Estimate, HilbertScaleSpec, ProblemConfig, SpectralProblem, TestbedError,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("{failures} of {cells} cells failed (limit 5%); first failure: {example}")]
    FailureRateExceeded { failures: usize, cells: usize, example: String },
    #[error("slope fit needs at least 4 grid points after burn-in, got {0}")]
    TooFewPoints(usize),
    #[error("mean error at m = {m} is not positive ({value})")]
    NonPositiveError { m: usize, value: f64 },
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Testbed(#[from] TestbedError),
    #[error(transparent)]
    Select(#[from] SelectError),
}

/// Error functional recorded per replicate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMetric {
    HNorm,
    Bregman,
}

/// Scale on which the slope is fitted and compared: against `log m` or
/// against `log(Sigma/(R sqrt m))` (twice the `log m` slope).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlopeScale {
    #[default]
    SqrtM,
    M,
}

/// Estimator family swept over the sample-size grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EstimatorSpec {
    /// Spectral filter with the a-priori rule, or a fixed `lambda` override.
    Spectral {
        filter: FilterSpec,
        #[serde(default)]
        lambda: Option<f64>,
    },
    /// Hilbert-scale estimator; the problem's source exponent is derived
    /// from `(a, s)` so the ground truth realizes the scale-side source
    /// condition exactly.
    HilbertScale {
        a: f64,
        s: f64,
        case: HsCase,
        filter: FilterSpec,
        #[serde(default)]
        p_bench: Option<f64>,
    },
    /// Projection estimator on the dedicated diagonal construction with
    /// spectral decay `t` and tail smoothness `s`.
    Projection { s: f64, t: f64 },
    /// Convex Besov-penalty estimator on the matched diagonal source.
    Convex {
        p: f64,
        besov_s: f64,
        #[serde(default)]
        weights: WeightFamily,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub id: String,
    pub problem: ProblemConfig,
    pub estimator: EstimatorSpec,
    pub m_grid: Vec<usize>,
    pub replicates: usize,
    pub base_seed: u64,
    /// Defaults to the estimator's natural metric (Bregman for convex,
    /// H-norm otherwise).
    #[serde(default)]
    pub error_metric: Option<ErrorMetric>,
    /// Leading grid points excluded from the slope fit.
    #[serde(default)]
    pub burn_in: usize,
    #[serde(default)]
    pub slope_scale: SlopeScale,
    /// Expected decay exponent on `slope_scale`; derived from the estimator
    /// spec when omitted.
    #[serde(default)]
    pub theoretical_exponent: Option<f64>,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

fn default_tolerance() -> f64 {
    0.08
}

#[derive(Debug, Clone, Serialize)]
pub struct CellRecord {
    pub m: usize,
    pub replicate: usize,
    pub seed: u64,
    /// Regularization parameter or projection dimension used by the cell.
    pub tuning: f64,
    pub error: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PerM {
    pub m: usize,
    pub mean: f64,
    pub median: f64,
    pub n_ok: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Verdict {
    pub pass: bool,
    /// `|slope - (-theoretical)|`.
    pub gap: f64,
    pub tolerance: f64,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", if self.pass { "PASS" } else { "FAIL" })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepResult {
    pub experiment_id: String,
    pub cells: Vec<CellRecord>,
    pub per_m: Vec<PerM>,
    /// Fitted slope on the configured scale.
    pub slope: f64,
    pub stderr: f64,
    pub slope_scale: SlopeScale,
    /// Raw OLS slope of log mean error against log m.
    pub slope_vs_m: f64,
    pub stderr_vs_m: f64,
    pub theoretical_exponent: f64,
    pub verdict: Verdict,
    pub n_cells: usize,
    pub n_failures: usize,
}

/// Deterministic per-cell seed; mixes the base seed with the grid position
/// through splitmix64 so cells are independent of evaluation order.
pub fn cell_seed(base_seed: u64, m: usize, replicate: usize) -> u64 {
    splitmix64(
        base_seed
            ^ splitmix64(m as u64)
            ^ splitmix64((replicate as u64).wrapping_mul(0xA24BAED4963EE407)),
    )
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Ordinary least squares of `log error` on `log m`; returns slope and its
/// standard error.
pub fn fit_rate(m_values: &[f64], mean_errors: &[f64]) -> Result<(f64, f64), SweepError> {
    assert_eq!(m_values.len(), mean_errors.len());
    if m_values.len() < 4 {
        return Err(SweepError::TooFewPoints(m_values.len()));
    }
    for (&m, &e) in m_values.iter().zip(mean_errors) {
        if e <= 0.0 {
            return Err(SweepError::NonPositiveError { m: m as usize, value: e });
        }
    }
    let xs: Vec<f64> = m_values.iter().map(|m| m.ln()).collect();
    let ys: Vec<f64> = mean_errors.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let xbar = xs.iter().sum::<f64>() / n;
    let ybar = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - xbar) * (x - xbar)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xbar) * (y - ybar)).sum();
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let rss: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let r = y - intercept - slope * x;
            r * r
        })
        .sum();
    let stderr = (rss / (n - 2.0) / sxx).sqrt();
    Ok((slope, stderr))
}

/// PASS when the fitted slope is within `tol` of `-theoretical`.
pub fn compare_exponent(slope: f64, _stderr: f64, theoretical: f64, tol: f64) -> Verdict {
    assert!(tol > 0.0);
    let gap = (slope + theoretical).abs();
    Verdict { pass: gap <= tol, gap, tolerance: tol }
}

/// Fully prepared experiment: the problem realizing the estimator's
/// assumptions plus everything needed to evaluate one cell.
struct PreparedExperiment {
    problem: SpectralProblem,
    evaluator: CellEvaluator,
    metric: ErrorMetric,
    theoretical_sqrt_m: f64,
}

enum CellEvaluator {
    Spectral { filter: SpectralFilter, fixed_lambda: Option<f64> },
    HilbertScale { scale: HilbertScaleSpec, filter: SpectralFilter, case: HsCase, s: f64, p_bench: f64 },
    Projection { s: f64, t: f64 },
    Convex { penalty: PenaltySpec },
}

fn prepare(config: &ExperimentConfig) -> Result<PreparedExperiment, SweepError> {
    match &config.estimator {
        EstimatorSpec::Spectral { filter, lambda } => {
            let problem = build_spectral_problem(&config.problem)?;
            let theoretical = 2.0 * problem.r / (2.0 * problem.r + problem.b + 1.0);
            let filter = filter
                .build(problem.kappa_sq)
                .map_err(|e| SweepError::BadConfig(e.to_string()))?;
            Ok(PreparedExperiment {
                problem,
                evaluator: CellEvaluator::Spectral { filter, fixed_lambda: *lambda },
                metric: config.error_metric.unwrap_or(ErrorMetric::HNorm),
                theoretical_sqrt_m: theoretical,
            })
        }
        EstimatorSpec::HilbertScale { a, s, case, filter, p_bench } => {
            // Source exponent so that ftrue = L^-s u holds exactly on the
            // diagonal: r = s a / (1 - 2a).
            let mut problem_config = config.problem.clone();
            problem_config.r = s * a / (1.0 - 2.0 * a);
            let problem = build_spectral_problem(&problem_config)?;
            let scale = make_hilbert_scale(&problem, *a)?;
            let p_bench = p_bench.unwrap_or(*s);
            let rule = apriori_lambda_hs(
                *case,
                *s,
                p_bench,
                *a,
                problem.b,
                problem.sigma_noise,
                problem.source_radius,
                config.m_grid[0],
            )?;
            let filter = filter
                .build(problem.kappa_sq)
                .map_err(|e| SweepError::BadConfig(e.to_string()))?;
            Ok(PreparedExperiment {
                problem,
                evaluator: CellEvaluator::HilbertScale {
                    scale,
                    filter,
                    case: *case,
                    s: *s,
                    p_bench,
                },
                metric: config.error_metric.unwrap_or(ErrorMetric::HNorm),
                theoretical_sqrt_m: rule.rate_exponent,
            })
        }
        EstimatorSpec::Projection { s, t } => {
            let problem = build_projection_problem(
                *s,
                *t,
                config.problem.source_radius,
                config.problem.sigma_noise,
                config.problem.modes,
                config.problem.seed,
            );
            Ok(PreparedExperiment {
                problem,
                evaluator: CellEvaluator::Projection { s: *s, t: *t },
                metric: config.error_metric.unwrap_or(ErrorMetric::HNorm),
                theoretical_sqrt_m: 2.0 * s / (2.0 * s + t + 1.0),
            })
        }
        EstimatorSpec::Convex { p, besov_s, weights } => {
            let base = build_spectral_problem(&config.problem)?;
            let penalty = match weights {
                WeightFamily::Besov => PenaltySpec::besov(*p, *besov_s, base.modes),
                WeightFamily::Unit => PenaltySpec::unit(*p, base.modes),
            };
            let ftrue = matched_besov_source(
                &penalty,
                &base.sigma,
                base.source_radius,
                config.problem.seed,
                config.problem.source,
            );
            let problem = crate::testbed::build_problem_from_parts(
                base.sigma.clone(),
                ftrue,
                base.b,
                base.beta,
                base.r,
                base.source_radius,
                base.sigma_noise,
                base.seed,
            );
            Ok(PreparedExperiment {
                problem,
                evaluator: CellEvaluator::Convex { penalty },
                metric: config.error_metric.unwrap_or(ErrorMetric::Bregman),
                theoretical_sqrt_m: 2.0 / 3.0,
            })
        }
    }
}

impl PreparedExperiment {
    fn run_cell(&self, m: usize, seed: u64) -> Result<(f64, f64), String> {
        let dataset = sample_dataset(&self.problem, m, seed);
        let (estimate, tuning) = match &self.evaluator {
            CellEvaluator::Spectral { filter, fixed_lambda } => {
                let lambda = fixed_lambda.unwrap_or_else(|| {
                    apriori_lambda(
                        self.problem.r,
                        self.problem.b,
                        self.problem.sigma_noise,
                        self.problem.source_radius,
                        m,
                    )
                    .value
                });
                let design = SpectralDesign::new(&self.problem, &dataset)
                    .map_err(|e| e.to_string())?;
                let est = design.estimate(filter, lambda).map_err(|e| e.to_string())?;
                (est, lambda)
            }
            CellEvaluator::HilbertScale { scale, filter, case, s, p_bench } => {
                let rule = apriori_lambda_hs(
                    *case,
                    *s,
                    *p_bench,
                    scale.a,
                    self.problem.b,
                    self.problem.sigma_noise,
                    self.problem.source_radius,
                    m,
                )
                .map_err(|e| e.to_string())?;
                let design = SpectralDesign::new(&self.problem, &dataset)
                    .map_err(|e| e.to_string())?;
                let est = hilbert_scale_estimate_with(&design, scale, filter, rule.lambda)
                    .map_err(|e| e.to_string())?;
                (est, rule.lambda)
            }
            CellEvaluator::Projection { s, t } => {
                let n = apriori_n_projection(
                    *s,
                    *t,
                    self.problem.sigma_noise,
                    self.problem.source_radius,
                    m,
                    self.problem.modes,
                )
                .map_err(|e| e.to_string())?;
                let (est, _) =
                    projection_estimate(&self.problem, &dataset, n).map_err(|e| e.to_string())?;
                (est, n as f64)
            }
            CellEvaluator::Convex { penalty } => {
                let lambda = crate::estimators::convex::convex_apriori_lambda(
                    penalty.p,
                    self.problem.source_radius,
                    self.problem.sigma_noise,
                    m,
                    ConvexLambdaRule::Besov,
                );
                let design = SpectralDesign::new(&self.problem, &dataset)
                    .map_err(|e| e.to_string())?;
                // Tight solver budget: slope fits need optimizer error well
                // below the statistical error.
                let opts = ConvexOptions { max_iters: 20_000, tol: 1e-9 };
                let (est, report) = convex_estimate_with(&design, &dataset, penalty, lambda, &opts)
                    .map_err(|e| e.to_string())?;
                if !report.converged {
                    return Err(format!(
                        "convex solver hit the iteration cap (residual {:.3e})",
                        report.optimality_residual
                    ));
                }
                (est, lambda)
            }
        };
        let error = self.error_of(&estimate).map_err(|e| e.to_string())?;
        Ok((error, tuning))
    }

    fn error_of(&self, est: &Estimate) -> Result<f64, TestbedError> {
        match (self.metric, &self.evaluator) {
            (ErrorMetric::HNorm, _) => h_norm_error(&self.problem, est),
            (ErrorMetric::Bregman, CellEvaluator::Convex { penalty }) => {
                Ok(bregman_distance(penalty, &est.coeffs, &self.problem.ftrue))
            }
            (ErrorMetric::Bregman, _) => Err(TestbedError::DimensionMismatch {
                expected: 0,
                got: 0,
            }),
        }
    }
}

/// Runs the full sweep. Cells are evaluated in parallel; the aggregation is
/// keyed by grid position, so the result is identical at any thread count.
pub fn run_sweep(config: &ExperimentConfig) -> Result<SweepResult, SweepError> {
    if config.m_grid.is_empty() || config.m_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SweepError::BadConfig("m_grid must be strictly ascending".into()));
    }
    if config.replicates == 0 {
        return Err(SweepError::BadConfig("replicates must be positive".into()));
    }
    let prepared = prepare(config)?;

    let cells_spec: Vec<(usize, usize)> = config
        .m_grid
        .iter()
        .flat_map(|&m| (0..config.replicates).map(move |k| (m, k)))
        .collect();

    let outcomes: Vec<CellRecord> = cells_spec
        .par_iter()
        .map(|&(m, k)| {
            let seed = cell_seed(config.base_seed, m, k);
            match prepared.run_cell(m, seed) {
                Ok((error, tuning)) => CellRecord {
                    m,
                    replicate: k,
                    seed,
                    tuning,
                    error,
                    failure: None,
                },
                Err(msg) => CellRecord {
                    m,
                    replicate: k,
                    seed,
                    tuning: f64::NAN,
                    error: f64::NAN,
                    failure: Some(msg),
                },
            }
        })
        .collect();

    let n_cells = outcomes.len();
    let n_failures = outcomes.iter().filter(|c| c.failure.is_some()).count();
    if n_failures * 20 > n_cells {
        let example = outcomes
            .iter()
            .find_map(|c| c.failure.clone())
            .unwrap_or_default();
        return Err(SweepError::FailureRateExceeded { failures: n_failures, cells: n_cells, example });
    }

    let mut per_m = Vec::with_capacity(config.m_grid.len());
    for &m in &config.m_grid {
        let mut errs: Vec<f64> = outcomes
            .iter()
            .filter(|c| c.m == m && c.failure.is_none())
            .map(|c| c.error)
            .collect();
        errs.sort_by(|a, b| a.partial_cmp(b).expect("finite errors"));
        let n_ok = errs.len();
        let mean = errs.iter().sum::<f64>() / n_ok as f64;
        let median = if n_ok % 2 == 1 {
            errs[n_ok / 2]
        } else {
            0.5 * (errs[n_ok / 2 - 1] + errs[n_ok / 2])
        };
        per_m.push(PerM { m, mean, median, n_ok });
    }

    if config.burn_in + 4 > per_m.len() {
        return Err(SweepError::TooFewPoints(per_m.len().saturating_sub(config.burn_in)));
    }
    let fit_points = &per_m[config.burn_in..];
    let ms: Vec<f64> = fit_points.iter().map(|p| p.m as f64).collect();
    let means: Vec<f64> = fit_points.iter().map(|p| p.mean).collect();
    let (slope_vs_m, stderr_vs_m) = fit_rate(&ms, &means)?;

    let (slope, stderr) = match config.slope_scale {
        SlopeScale::M => (slope_vs_m, stderr_vs_m),
        SlopeScale::SqrtM => (2.0 * slope_vs_m, 2.0 * stderr_vs_m),
    };
    let theoretical = config.theoretical_exponent.unwrap_or(match config.slope_scale {
        SlopeScale::SqrtM => prepared.theoretical_sqrt_m,
        SlopeScale::M => prepared.theoretical_sqrt_m / 2.0,
    });
    let verdict = compare_exponent(slope, stderr, theoretical, config.tolerance);

    Ok(SweepResult {
        experiment_id: config.id.clone(),
        cells: outcomes,
        per_m,
        slope,
        stderr,
        slope_scale: config.slope_scale,
        slope_vs_m,
        stderr_vs_m,
        theoretical_exponent: theoretical,
        verdict,
        n_cells,
        n_failures,
    })
}

impl SweepResult {
    /// Cell-level CSV: `m,replicate,error,lambda_or_n,seed`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("m,replicate,error,lambda_or_n,seed\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                c.m, c.replicate, c.error, c.tuning, c.seed
            ));
        }
        out
    }

    pub fn summary_json(&self) -> serde_json::Value {
        json!({
            "experiment_id": self.experiment_id,
            "slope": self.slope,
            "stderr": self.stderr,
            "slope_scale": self.slope_scale,
            "slope_vs_m": self.slope_vs_m,
            "theoretical_exponent": self.theoretical_exponent,
            "verdict": self.verdict.to_string(),
            "gap": self.verdict.gap,
            "tolerance": self.verdict.tolerance,
            "n_cells": self.n_cells,
            "n_failures": self.n_failures,
            "per_m": self.per_m,
        })
    }

    /// Minimal static log-log plot of the per-m mean errors and the fitted
    /// line.
    pub fn to_svg(&self) -> String {
        let pts: Vec<(f64, f64)> = self
            .per_m
            .iter()
            .map(|p| ((p.m as f64).log10(), p.mean.log10()))
            .collect();
        let (x_min, x_max) = pts
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
        let (y_min, y_max) = pts
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
        let (w, h, pad) = (480.0, 360.0, 50.0);
        let sx = |x: f64| pad + (x - x_min) / ((x_max - x_min).max(1e-9)) * (w - 2.0 * pad);
        let sy = |y: f64| h - pad - (y - y_min) / ((y_max - y_min).max(1e-9)) * (h - 2.0 * pad);
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
             <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
             <text x=\"{}\" y=\"20\" font-size=\"13\" text-anchor=\"middle\">{} (slope {:.3}, target -{:.3}, {})</text>\n",
            w / 2.0,
            self.experiment_id,
            self.slope,
            self.theoretical_exponent,
            self.verdict
        );
        svg.push_str(&format!(
            "<line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
             <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>\n",
            h - pad,
            w - pad,
            h - pad,
            h - pad
        ));
        // Fitted line through the burn-in-excluded points, in log m scale.
        let slope_m = self.slope_vs_m;
        let anchor = &self.per_m[self.per_m.len() - 1];
        let anchor_x = (anchor.m as f64).log10();
        let anchor_y = anchor.mean.log10();
        let line_y = |x: f64| anchor_y + slope_m * (x - anchor_x);
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#888\" stroke-dasharray=\"4 3\"/>\n",
            sx(x_min),
            sy(line_y(x_min)),
            sx(x_max),
            sy(line_y(x_max))
        ));
        for p in &pts {
            svg.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3.5\" fill=\"#1f77b4\"/>\n",
                sx(p.0),
                sy(p.1)
            ));
        }
        for p in &self.per_m {
            svg.push_str(&format!(
                "<text x=\"{:.2}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">{}</text>\n",
                sx((p.m as f64).log10()),
                h - pad + 14.0,
                p.m
            ));
        }
        svg.push_str("</svg>\n");
        svg
    }
}

/// Data-driven selection rule for the adaptivity experiment.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum SelectionMethod {
    Lepskii {
        #[serde(default = "default_lepskii_c")]
        c: f64,
    },
    Holdout {
        #[serde(default = "default_split")]
        split: f64,
    },
}

fn default_lepskii_c() -> f64 {
    1.5
}

fn default_split() -> f64 {
    0.5
}

/// Fixed-m Monte Carlo comparison of a data-driven rule against the grid
/// oracle, with the true smoothness hidden from the rule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptivityConfig {
    pub id: String,
    pub problem: ProblemConfig,
    /// Source exponents to cycle through; the rule never sees them.
    pub r_values: Vec<f64>,
    pub m: usize,
    pub replicates: usize,
    pub base_seed: u64,
    pub selection: SelectionMethod,
    /// Success means selected error within this factor of the grid oracle.
    pub ratio_threshold: f64,
    /// Required fraction of successful replicates.
    pub success_fraction: f64,
    #[serde(default = "default_grid_k")]
    pub grid_k: usize,
}

fn default_grid_k() -> usize {
    20
}

#[derive(Debug, Clone, Serialize)]
pub struct AdaptivityRow {
    pub r: f64,
    pub successes: usize,
    pub total: usize,
    pub fraction: f64,
    /// Median of selected-error / oracle-error over replicates.
    pub median_ratio: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct AdaptivityResult {
    pub experiment_id: String,
    pub rows: Vec<AdaptivityRow>,
    pub pass: bool,
}

pub fn run_adaptivity(config: &AdaptivityConfig) -> Result<AdaptivityResult, SweepError> {
    if config.r_values.is_empty() {
        return Err(SweepError::BadConfig("need at least one source exponent".into()));
    }
    let mut rows = Vec::new();
    for (ri, &r) in config.r_values.iter().enumerate() {
        let mut problem_config = config.problem.clone();
        problem_config.r = r;
        let problem = build_spectral_problem(&problem_config)?;
        let grid = LambdaGrid::geometric(
            problem.kappa_sq * 2f64.powi(-(config.grid_k as i32)),
            2.0,
            config.grid_k,
        );
        let filter = SpectralFilter::tikhonov(1, problem.kappa_sq);

        let ratios: Vec<f64> = (0..config.replicates)
            .into_par_iter()
            .map(|k| {
                let seed = cell_seed(config.base_seed, config.m + ri, k);
                let dataset = sample_dataset(&problem, config.m, seed);
                let design = SpectralDesign::new(&problem, &dataset)
                    .map_err(|e| e.to_string())?;
                let errors: Vec<f64> = grid
                    .values
                    .iter()
                    .map(|&l| {
                        let est = design.estimate(&filter, l).map_err(|e| e.to_string())?;
                        h_norm_error(&problem, &est).map_err(|e| e.to_string())
                    })
                    .collect::<Result<_, String>>()?;
                let oracle = errors.iter().copied().fold(f64::INFINITY, f64::min);

                let selected_lambda = match config.selection {
                    SelectionMethod::Lepskii { c } => {
                        let mid_lambda = grid.values[grid.values.len() / 2];
                        let sigma_hat =
                            estimate_noise_holdout(&problem, &dataset, mid_lambda, 0.5)
                                .map_err(|e| e.to_string())?;
                        let proxy = SampleErrorProxy::new(&design, sigma_hat, sigma_hat)
                            .map_err(|e| e.to_string())?;
                        lepskii_select(
                            &problem,
                            &dataset,
                            &grid,
                            |l| design.estimate(&filter, l),
                            |l| proxy.eval(l),
                            c,
                        )
                        .map_err(|e| e.to_string())?
                        .lambda
                    }
                    SelectionMethod::Holdout { split } => holdout_select(
                        &problem,
                        &dataset,
                        &grid,
                        split,
                        |d, l| {
                            let train_design = SpectralDesign::new(&problem, d)?;
                            train_design.estimate(&filter, l)
                        },
                    )
                    .map_err(|e| e.to_string())?,
                };
                let idx = grid
                    .values
                    .iter()
                    .position(|&l| l == selected_lambda)
                    .expect("selection comes from the grid");
                Ok(errors[idx] / oracle)
            })
            .collect::<Result<Vec<f64>, String>>()
            .map_err(SweepError::BadConfig)?;

        let successes = ratios.iter().filter(|&&x| x <= config.ratio_threshold).count();
        let fraction = successes as f64 / ratios.len() as f64;
        let mut sorted = ratios.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median_ratio = sorted[sorted.len() / 2];
        rows.push(AdaptivityRow {
            r,
            successes,
            total: ratios.len(),
            fraction,
            median_ratio,
            pass: fraction >= config.success_fraction,
        });
    }
    let pass = rows.iter().all(|row| row.pass);
    Ok(AdaptivityResult { experiment_id: config.id.clone(), rows, pass })
}

impl AdaptivityResult {
    pub fn summary_json(&self) -> serde_json::Value {
        json!({
            "experiment_id": self.experiment_id,
            "rows": self.rows,
            "verdict": if self.pass { "PASS" } else { "FAIL" },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testbed::SourceProfile;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn base_problem() -> ProblemConfig {
        ProblemConfig {
            b: 0.5,
            beta: 1.0,
            r: 0.5,
            source_radius: 1.0,
            sigma_noise: 1.0,
            modes: 64,
            seed: 5,
            source: SourceProfile::Sphere,
        }
    }

    #[test]
    fn debug_rate_scan() {
        for (b, besov_s, sigma_noise) in [
            (0.5, 0.5, 0.01), (0.5, 0.5, 0.003),
        ] {
            let config = ExperimentConfig {
                id: "convex-rate".into(),
                problem: ProblemConfig {
                    b, beta: 1.0, r: 0.5, source_radius: 1.0, sigma_noise,
                    modes: 128, seed: 11, source: SourceProfile::Boundary,
                },
                estimator: EstimatorSpec::Convex { p: 1.5, besov_s, weights: WeightFamily::Besov },
                m_grid: vec![512, 1024, 2048, 4096, 8192],
                replicates: 50,
                base_seed: 20240604,
                error_metric: None,
                burn_in: 0,
                slope_scale: SlopeScale::M,
                theoretical_exponent: None,
                tolerance: 0.08,
            };
            let t0 = std::time::Instant::now();
            let result = run_sweep(&config).unwrap();
            println!("CONVEX b={b} s={besov_s:.3} sigma={sigma_noise}: slope {:.4} gap {:.4} stderr {:.4} [{:.1}s] {}",
                result.slope, result.verdict.gap, result.stderr, t0.elapsed().as_secs_f64(), result.verdict);
        }
    }

    #[test]
    fn fit_rate_exact_power_law() {
        let ms: Vec<f64> = vec![128.0, 256.0, 512.0, 1024.0, 2048.0];
        let errs: Vec<f64> = ms.iter().map(|m| 3.0 * m.powf(-0.4)).collect();
        let (slope, stderr) = fit_rate(&ms, &errs).unwrap();
        assert!((slope + 0.4).abs() < 1e-12);
        assert!(stderr < 1e-10);
    }

    #[test]
    fn fit_rate_constant_errors() {
        let ms: Vec<f64> = vec![128.0, 256.0, 512.0, 1024.0];
        let errs = vec![0.7; 4];
        let (slope, _) = fit_rate(&ms, &errs).unwrap();
        assert!(slope.abs() < 1e-12);
    }

    #[test]
    fn fit_rate_with_multiplicative_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ms: Vec<f64> = (0..8).map(|k| 128.0 * 2f64.powi(k)).collect();
        let errs: Vec<f64> = ms
            .iter()
            .map(|m| 2.0 * m.powf(-0.4) * (1.0 + 0.05 * rng.random_range(-1.0..1.0)))
            .collect();
        let (slope, _) = fit_rate(&ms, &errs).unwrap();
        assert!((slope + 0.4).abs() <= 0.05, "slope {slope}");
    }

    #[test]
    fn fit_rate_input_validation() {
        assert!(matches!(
            fit_rate(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]),
            Err(SweepError::TooFewPoints(3))
        ));
        assert!(matches!(
            fit_rate(&[1.0, 2.0, 3.0, 4.0], &[1.0, 0.0, 1.0, 1.0]),
            Err(SweepError::NonPositiveError { .. })
        ));
    }

    #[test]
    fn compare_exponent_examples() {
        assert!(compare_exponent(-0.41, 0.01, 0.4, 0.08).pass);
        let fail = compare_exponent(-0.2, 0.01, 0.4, 0.08);
        assert!(!fail.pass);
        assert!((fail.gap - 0.2).abs() < 1e-12);
        // Table-row arithmetic: regular-optimal exponent at a=1/4, s=1,
        // b=1/2 is 1/3.
        let rule = apriori_lambda_hs(HsCase::RegularOptimal, 1.0, 1.0, 0.25, 0.5, 1.0, 1.0, 100)
            .unwrap();
        assert!((rule.rate_exponent - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn noiseless_sweep_with_fixed_lambda_is_flat() {
        // Without noise and with a fixed lambda the error is pure smoothing
        // bias, which does not depend on the sample size.
        let mut problem = base_problem();
        problem.sigma_noise = 0.0;
        problem.modes = 32;
        let config = ExperimentConfig {
            id: "bias-only".into(),
            problem,
            estimator: EstimatorSpec::Spectral {
                filter: FilterSpec::Tikhonov { l: 1 },
                lambda: Some(1e-2),
            },
            m_grid: vec![256, 512, 1024, 2048],
            replicates: 10,
            base_seed: 9,
            error_metric: None,
            burn_in: 0,
            slope_scale: SlopeScale::SqrtM,
            theoretical_exponent: Some(0.0),
            tolerance: 0.15,
        };
        let result = run_sweep(&config).unwrap();
        assert!(result.slope.abs() <= 0.15, "slope {}", result.slope);
        assert!(result.verdict.pass);
    }

    #[test]
    fn sweep_output_is_deterministic_across_thread_counts() {
        let config = ExperimentConfig {
            id: "determinism".into(),
            problem: base_problem(),
            estimator: EstimatorSpec::Spectral {
                filter: FilterSpec::Tikhonov { l: 1 },
                lambda: None,
            },
            m_grid: vec![32, 64, 128, 256],
            replicates: 8,
            base_seed: 31,
            error_metric: None,
            burn_in: 0,
            slope_scale: SlopeScale::SqrtM,
            theoretical_exponent: None,
            tolerance: 10.0,
        };
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let quad = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let r1 = single.install(|| run_sweep(&config)).unwrap();
        let r2 = quad.install(|| run_sweep(&config)).unwrap();
        assert_eq!(r1.to_csv(), r2.to_csv());
        assert_eq!(
            serde_json::to_string(&r1.summary_json()).unwrap(),
            serde_json::to_string(&r2.summary_json()).unwrap()
        );
    }

    #[test]
    fn small_spectral_sweep_runs_clean() {
        let config = ExperimentConfig {
            id: "smoke".into(),
            problem: base_problem(),
            estimator: EstimatorSpec::Spectral {
                filter: FilterSpec::Tikhonov { l: 1 },
                lambda: None,
            },
            m_grid: vec![64, 128, 256, 512],
            replicates: 10,
            base_seed: 5,
            error_metric: None,
            burn_in: 0,
            slope_scale: SlopeScale::SqrtM,
            theoretical_exponent: None,
            tolerance: 10.0,
        };
        let result = run_sweep(&config).unwrap();
        assert_eq!(result.n_failures, 0);
        assert_eq!(result.n_cells, 40);
        assert!((result.theoretical_exponent - 0.4).abs() < 1e-12);
        let csv = result.to_csv();
        assert_eq!(csv.lines().count(), 41);
        // Errors decrease on average across the grid ends.
        assert!(result.per_m.last().unwrap().mean < result.per_m[0].mean);
        let svg = result.to_svg();
        assert!(svg.starts_with("<svg") && svg.contains("circle"));
    }

    #[test]
    fn cell_seed_is_stable_and_spread() {
        let s1 = cell_seed(7, 128, 0);
        assert_eq!(s1, cell_seed(7, 128, 0));
        assert_ne!(s1, cell_seed(7, 128, 1));
        assert_ne!(s1, cell_seed(7, 256, 0));
        assert_ne!(s1, cell_seed(8, 128, 0));
    }

    #[test]
    fn config_json_round_trip() {
        let config = ExperimentConfig {
            id: "rt".into(),
            problem: base_problem(),
            estimator: EstimatorSpec::HilbertScale {
                a: 0.25,
                s: 1.0,
                case: HsCase::RegularOptimal,
                filter: FilterSpec::Tikhonov { l: 1 },
                p_bench: None,
            },
            m_grid: vec![128, 256, 512, 1024],
            replicates: 10,
            base_seed: 1,
            error_metric: None,
            burn_in: 0,
            slope_scale: SlopeScale::SqrtM,
            theoretical_exponent: None,
            tolerance: 0.1,
        };
        let text = serde_json::to_string_pretty(&config).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.id, "rt");
        assert!(matches!(back.estimator, EstimatorSpec::HilbertScale { .. }));
    }
}
