//! Nonlinear Tikhonov regularization solved by Levenberg-Marquardt, for a
//! pluggable differentiable forward model, plus finite-difference order
//! checks for the model derivative.

use crate::linalg::{axpy, dot, norm2, Cholesky, SymMatrix};
use crate::testbed::{Dataset, Estimate, HilbertScaleSpec, SpectralProblem};
use serde::{Deserialize, Serialize};

/// A differentiable forward model observed at a fixed design.
///
/// Residuals are stacked per sample; `jacobian_at` fills the
/// `output_dim x param_dim` block of sample `i` in row-major order.
pub trait ForwardModel {
    fn sample_count(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn param_dim(&self) -> usize;
    fn eval_at(&self, params: &[f64], i: usize, out: &mut [f64]);
    fn jacobian_at(&self, params: &[f64], i: usize, jac: &mut [f64]);
}

/// Quadratic penalty metric `||f - fbar||^2` in the chosen geometry.
#[derive(Debug, Clone)]
pub enum PenaltyMetric {
    /// Euclidean norm on the parameter vector.
    Identity,
    /// `sum_k d_k (p_k - pbar_k)^2`, e.g. Hilbert-scale weights `d_k = k^{2w}`.
    Diagonal(Vec<f64>),
    /// Parameters are `blocks` stacked groups sharing one Gram matrix;
    /// the penalty is `sum_b a_b' G a_b` (RKHS norm of a representer
    /// expansion per block).
    BlockGram { gram: SymMatrix, blocks: usize },
}

impl PenaltyMetric {
    fn check_dim(&self, dim: usize) {
        match self {
            PenaltyMetric::Identity => {}
            PenaltyMetric::Diagonal(d) => assert_eq!(d.len(), dim),
            PenaltyMetric::BlockGram { gram, blocks } => {
                assert_eq!(gram.dim() * blocks, dim)
            }
        }
    }

    fn value(&self, delta: &[f64]) -> f64 {
        match self {
            PenaltyMetric::Identity => dot(delta, delta),
            PenaltyMetric::Diagonal(d) => {
                delta.iter().zip(d).map(|(x, w)| w * x * x).sum()
            }
            PenaltyMetric::BlockGram { gram, blocks } => {
                let n = gram.dim();
                (0..*blocks)
                    .map(|b| gram.quad_form(&delta[b * n..(b + 1) * n]))
                    .sum()
            }
        }
    }

    fn matvec(&self, delta: &[f64]) -> Vec<f64> {
        match self {
            PenaltyMetric::Identity => delta.to_vec(),
            PenaltyMetric::Diagonal(d) => {
                delta.iter().zip(d).map(|(x, w)| w * x).collect()
            }
            PenaltyMetric::BlockGram { gram, blocks } => {
                let n = gram.dim();
                let mut out = vec![0.0; delta.len()];
                for b in 0..*blocks {
                    let block = gram.matvec(&delta[b * n..(b + 1) * n]);
                    out[b * n..(b + 1) * n].copy_from_slice(&block);
                }
                out
            }
        }
    }

    fn add_scaled_to(&self, scale: f64, h: &mut [f64], dim: usize) {
        match self {
            PenaltyMetric::Identity => {
                for k in 0..dim {
                    h[k * dim + k] += scale;
                }
            }
            PenaltyMetric::Diagonal(d) => {
                for k in 0..dim {
                    h[k * dim + k] += scale * d[k];
                }
            }
            PenaltyMetric::BlockGram { gram, blocks } => {
                let n = gram.dim();
                for b in 0..*blocks {
                    for i in 0..n {
                        for j in 0..n {
                            h[(b * n + i) * dim + (b * n + j)] += scale * gram.get(i, j);
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NlOptions {
    pub max_iters: usize,
    /// Stop when the objective gradient norm falls below this.
    pub tol: f64,
    pub damping0: f64,
    /// Optional box constraints; iterates are projected after each step.
    #[serde(default)]
    pub bounds: Option<(Vec<f64>, Vec<f64>)>,
}

impl Default for NlOptions {
    fn default() -> Self {
        Self { max_iters: 200, tol: 1e-8, damping0: 1e-3, bounds: None }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct NlSolveReport {
    pub iterations: usize,
    pub final_objective: f64,
    pub gradient_norm: f64,
    /// Damping value at each accepted step.
    pub damping_trace: Vec<f64>,
    /// Objective after each accepted step; strictly decreasing.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
}

/// Minimizes `(1/m) sum_i ||model(p)(x_i) - y_i||^2 + lambda ||p - p_bar||^2`
/// (penalty norm per `metric`) by Levenberg-Marquardt with multiplicative
/// damping adaptation. Returns the best iterate and a solve report.
pub fn nonlinear_tikhonov(
    model: &dyn ForwardModel,
    y: &[f64],
    metric: &PenaltyMetric,
    lambda: f64,
    p_bar: &[f64],
    opts: &NlOptions,
) -> (Vec<f64>, NlSolveReport) {
    assert!(lambda > 0.0);
    let m = model.sample_count();
    let q = model.output_dim();
    let dim = model.param_dim();
    assert_eq!(y.len(), m * q);
    assert_eq!(p_bar.len(), dim);
    metric.check_dim(dim);

    let inv_m = 1.0 / m as f64;
    let objective = |p: &[f64]| -> f64 {
        let mut out = vec![0.0; q];
        let mut acc = 0.0;
        for i in 0..m {
            model.eval_at(p, i, &mut out);
            for k in 0..q {
                let r = out[k] - y[i * q + k];
                acc += r * r;
            }
        }
        let delta: Vec<f64> = p.iter().zip(p_bar).map(|(a, b)| a - b).collect();
        acc * inv_m + lambda * metric.value(&delta)
    };

    let project = |p: &mut [f64]| {
        if let Some((lo, hi)) = &opts.bounds {
            for ((x, l), h) in p.iter_mut().zip(lo).zip(hi) {
                *x = x.clamp(*l, *h);
            }
        }
    };

    let mut p = p_bar.to_vec();
    project(&mut p);
    let mut obj = objective(&p);
    let mut damping = opts.damping0;
    let mut damping_trace = Vec::new();
    let mut objective_trace = vec![obj];
    let mut converged = false;
    let mut iterations = 0;
    let mut gradient_norm = f64::NAN;

    let mut jac = vec![0.0; q * dim];
    let mut out = vec![0.0; q];

    for it in 0..opts.max_iters {
        iterations = it + 1;
        // Assemble (2/m) J'J + 2 lambda P and the gradient.
        let mut h = vec![0.0; dim * dim];
        let mut grad = vec![0.0; dim];
        for i in 0..m {
            model.eval_at(&p, i, &mut out);
            model.jacobian_at(&p, i, &mut jac);
            for k in 0..q {
                let r = out[k] - y[i * q + k];
                let row = &jac[k * dim..(k + 1) * dim];
                axpy(2.0 * inv_m * r, row, &mut grad);
                for a in 0..dim {
                    let ja = row[a];
                    if ja != 0.0 {
                        axpy(2.0 * inv_m * ja, &row[a..], &mut h[a * dim + a..a * dim + dim]);
                    }
                }
            }
        }
        // Mirror the accumulated upper triangle.
        for a in 0..dim {
            for b in (a + 1)..dim {
                h[b * dim + a] = h[a * dim + b];
            }
        }
        let delta_p: Vec<f64> = p.iter().zip(p_bar).map(|(a, b)| a - b).collect();
        axpy(2.0 * lambda, &metric.matvec(&delta_p), &mut grad);
        metric.add_scaled_to(2.0 * lambda, &mut h, dim);

        gradient_norm = norm2(&grad);
        if gradient_norm <= opts.tol {
            converged = true;
            break;
        }

        // Damped step with accept/reject and x10 adaptation.
        let mut accepted = false;
        for _ in 0..40 {
            let mut h_damped = h.clone();
            for k in 0..dim {
                h_damped[k * dim + k] += damping;
            }
            let sys = SymMatrix::new(dim, h_damped).expect("symmetric by construction");
            let step = match Cholesky::new(&sys, 0.0) {
                Ok(chol) => {
                    let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                    chol.solve(&neg)
                }
                Err(_) => {
                    damping *= 10.0;
                    continue;
                }
            };
            let mut candidate = p.clone();
            axpy(1.0, &step, &mut candidate);
            project(&mut candidate);
            let cand_obj = objective(&candidate);
            if cand_obj < obj {
                p = candidate;
                obj = cand_obj;
                damping = (damping / 10.0).max(1e-14);
                damping_trace.push(damping);
                objective_trace.push(obj);
                accepted = true;
                break;
            }
            damping *= 10.0;
            if damping > 1e14 {
                break;
            }
        }
        if !accepted {
            // No descent direction left at any damping: local stationarity.
            break;
        }
    }

    let report = NlSolveReport {
        iterations,
        final_objective: obj,
        gradient_norm,
        damping_trace,
        objective_trace,
        converged,
    };
    (p, report)
}

/// Linear testbed forward model over truncated basis coefficients; plugging
/// it into [`nonlinear_tikhonov`] must reproduce the closed-form Tikhonov
/// estimator.
pub struct TestbedLinearModel {
    features: Vec<Vec<f64>>,
}

impl TestbedLinearModel {
    pub fn new(problem: &SpectralProblem, dataset: &Dataset) -> Self {
        let features = dataset
            .xs
            .iter()
            .map(|&x| {
                let mut row = vec![0.0; problem.modes];
                problem.feature_row(x, &mut row);
                row
            })
            .collect();
        Self { features }
    }
}

impl ForwardModel for TestbedLinearModel {
    fn sample_count(&self) -> usize {
        self.features.len()
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn param_dim(&self) -> usize {
        self.features[0].len()
    }
    fn eval_at(&self, params: &[f64], i: usize, out: &mut [f64]) {
        out[0] = dot(&self.features[i], params);
    }
    fn jacobian_at(&self, _params: &[f64], i: usize, jac: &mut [f64]) {
        jac.copy_from_slice(&self.features[i]);
    }
}

/// Testbed-facing wrapper: coefficients of the regularized solution with an
/// optional Hilbert-scale penalty.
pub fn nonlinear_tikhonov_estimate(
    problem: &SpectralProblem,
    dataset: &Dataset,
    lambda: f64,
    f_bar: &Estimate,
    scale: Option<&HilbertScaleSpec>,
    opts: &NlOptions,
) -> (Estimate, NlSolveReport) {
    let model = TestbedLinearModel::new(problem, dataset);
    let metric = match scale {
        None => PenaltyMetric::Identity,
        Some(s) => PenaltyMetric::Diagonal(s.weights.iter().map(|w| w * w).collect()),
    };
    let (params, report) =
        nonlinear_tikhonov(&model, &dataset.ys, &metric, lambda, &f_bar.coeffs, opts);
    (Estimate::from_coeffs(params), report)
}

/// Observed convergence order of `||A(f + h g) - A(f) - h A'(f) g|| / h` at
/// sample `i` as `h` decreases: the slope of `log(remainder/h)` against
/// `log h`. Returns infinity when every remainder vanishes (exactly linear
/// models).
pub fn frechet_check(
    model: &dyn ForwardModel,
    params: &[f64],
    direction: &[f64],
    i: usize,
    h_grid: &[f64],
) -> f64 {
    assert!(h_grid.len() >= 2, "need at least two step sizes");
    let q = model.output_dim();
    let dim = model.param_dim();
    let mut base = vec![0.0; q];
    model.eval_at(params, i, &mut base);
    let mut jac = vec![0.0; q * dim];
    model.jacobian_at(params, i, &mut jac);
    let jg: Vec<f64> = (0..q).map(|k| dot(&jac[k * dim..(k + 1) * dim], direction)).collect();

    let scale = norm2(&base).max(1.0);
    let mut points = Vec::new();
    for &h in h_grid {
        assert!(h > 0.0);
        let shifted: Vec<f64> =
            params.iter().zip(direction).map(|(p, g)| p + h * g).collect();
        let mut val = vec![0.0; q];
        model.eval_at(&shifted, i, &mut val);
        let rem: f64 = (0..q)
            .map(|k| {
                let r = val[k] - base[k] - h * jg[k];
                r * r
            })
            .sum::<f64>()
            .sqrt();
        if rem > 1e-14 * scale {
            points.push((h.ln(), (rem / h).ln()));
        }
    }
    if points.is_empty() {
        return f64::INFINITY;
    }
    if points.len() == 1 {
        return f64::NAN;
    }
    let n = points.len() as f64;
    let xbar = points.iter().map(|(x, _)| x).sum::<f64>() / n;
    let ybar = points.iter().map(|(_, y)| y).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|(x, y)| (x - xbar) * (y - ybar)).sum();
    let sxx: f64 = points.iter().map(|(x, _)| (x - xbar) * (x - xbar)).sum();
    sxy / sxx
}

/// Maximum relative disagreement between the analytic Jacobian and central
/// finite differences in a random direction, over all samples.
pub fn jacobian_fd_gap(model: &dyn ForwardModel, params: &[f64], direction: &[f64], h: f64) -> f64 {
    let q = model.output_dim();
    let dim = model.param_dim();
    let mut jac = vec![0.0; q * dim];
    let plus: Vec<f64> = params.iter().zip(direction).map(|(p, g)| p + h * g).collect();
    let minus: Vec<f64> = params.iter().zip(direction).map(|(p, g)| p - h * g).collect();
    let mut vp = vec![0.0; q];
    let mut vm = vec![0.0; q];
    let mut worst = 0.0f64;
    for i in 0..model.sample_count() {
        model.jacobian_at(params, i, &mut jac);
        model.eval_at(&plus, i, &mut vp);
        model.eval_at(&minus, i, &mut vm);
        for k in 0..q {
            let fd = (vp[k] - vm[k]) / (2.0 * h);
            let analytic = dot(&jac[k * dim..(k + 1) * dim], direction);
            let gap = (fd - analytic).abs() / (1.0 + analytic.abs());
            worst = worst.max(gap);
        }
    }
    worst
}

/// A-priori rule `lambda = (Sigma/(R sqrt m))^(2/(2r + b + 1))`; the boolean
/// records whether `r` lies in the validity range `[1/2, 1]`.
pub fn nonlinear_apriori_lambda(
    r: f64,
    b: f64,
    sigma_noise: f64,
    source_radius: f64,
    m: usize,
) -> (f64, bool) {
    assert!(r > 0.0 && b > 0.0 && sigma_noise > 0.0 && source_radius > 0.0 && m > 0);
    let base = sigma_noise / (source_radius * (m as f64).sqrt());
    (base.powf(2.0 / (2.0 * r + b + 1.0)), (0.5..=1.0).contains(&r))
}

/// Hilbert-scale a-priori rule `lambda = (1/sqrt m)^(2p/(p + s - 1 + b p))`.
pub fn nonlinear_apriori_lambda_hs(p: f64, s: f64, b: f64, m: usize) -> f64 {
    assert!(p >= 1.0 && s > 0.0 && b > 0.0 && m > 0);
    (1.0 / (m as f64).sqrt()).powf(2.0 * p / (p + s - 1.0 + b * p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::linear::{relative_h_gap, spectral_estimate_direct};
    use crate::filters::SpectralFilter;
    use crate::testbed::{build_spectral_problem, sample_dataset, ProblemConfig, SourceProfile};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn problem(noise: f64, modes: usize, seed: u64) -> SpectralProblem {
        build_spectral_problem(&ProblemConfig {
            b: 0.5,
            beta: 1.0,
            r: 0.5,
            source_radius: 1.0,
            sigma_noise: noise,
            modes,
            seed,
            source: SourceProfile::Sphere,
        })
        .unwrap()
    }

    /// Pointwise square of the linear testbed forward map.
    struct QuadraticModel {
        inner: TestbedLinearModel,
    }

    impl ForwardModel for QuadraticModel {
        fn sample_count(&self) -> usize {
            self.inner.sample_count()
        }
        fn output_dim(&self) -> usize {
            1
        }
        fn param_dim(&self) -> usize {
            self.inner.param_dim()
        }
        fn eval_at(&self, params: &[f64], i: usize, out: &mut [f64]) {
            self.inner.eval_at(params, i, out);
            out[0] = out[0] * out[0];
        }
        fn jacobian_at(&self, params: &[f64], i: usize, jac: &mut [f64]) {
            let mut v = [0.0];
            self.inner.eval_at(params, i, &mut v);
            self.inner.jacobian_at(params, i, jac);
            for g in jac.iter_mut() {
                *g *= 2.0 * v[0];
            }
        }
    }

    #[test]
    fn linear_model_reduces_to_closed_form_tikhonov() {
        let p = problem(0.4, 24, 1);
        let d = sample_dataset(&p, 40, 2);
        let lambda = 0.05;
        let (est, report) = nonlinear_tikhonov_estimate(
            &p,
            &d,
            lambda,
            &Estimate::zero(p.modes),
            None,
            &NlOptions { max_iters: 100, tol: 1e-12, ..Default::default() },
        );
        let filter = SpectralFilter::tikhonov(1, p.kappa_sq);
        let oracle = spectral_estimate_direct(&p, &d, &filter, lambda).unwrap();
        let gap = relative_h_gap(&est, &oracle);
        assert!(gap <= 1e-6, "gap {gap:.3e} after {} iters", report.iterations);
    }

    #[test]
    fn huge_lambda_returns_initial_guess() {
        let p = problem(0.4, 16, 3);
        let d = sample_dataset(&p, 20, 4);
        let f_bar = Estimate::from_coeffs((0..16).map(|i| 0.1 * i as f64).collect());
        let (est, _) = nonlinear_tikhonov_estimate(
            &p,
            &d,
            1e9,
            &f_bar,
            None,
            &NlOptions::default(),
        );
        let gap: f64 = est
            .coeffs
            .iter()
            .zip(&f_bar.coeffs)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(gap <= 1e-6, "gap {gap:.3e}");
    }

    #[test]
    fn accepted_steps_strictly_decrease_objective() {
        let p = problem(0.4, 16, 5);
        let d = sample_dataset(&p, 30, 6);
        let model = QuadraticModel { inner: TestbedLinearModel::new(&p, &d) };
        let y: Vec<f64> = d.ys.iter().map(|v| v * v).collect();
        let (_, report) = nonlinear_tikhonov(
            &model,
            &y,
            &PenaltyMetric::Identity,
            1e-3,
            &vec![0.05; 16],
            &NlOptions::default(),
        );
        assert!(report.objective_trace.len() > 2);
        for w in report.objective_trace.windows(2) {
            assert!(w[1] < w[0], "objective did not decrease: {:?}", w);
        }
        assert_eq!(report.damping_trace.len() + 1, report.objective_trace.len());
    }

    #[test]
    fn frechet_linear_model_has_zero_remainder() {
        let p = problem(0.0, 16, 7);
        let d = sample_dataset(&p, 10, 8);
        let model = TestbedLinearModel::new(&p, &d);
        let params = vec![0.3; 16];
        let dir: Vec<f64> = (0..16).map(|i| ((i + 1) as f64).recip()).collect();
        let h_grid = [1e-2, 1e-3, 1e-4, 1e-5];
        let order = frechet_check(&model, &params, &dir, 3, &h_grid);
        assert!(order.is_infinite());
    }

    #[test]
    fn frechet_quadratic_model_has_order_one() {
        let p = problem(0.0, 16, 9);
        let d = sample_dataset(&p, 10, 10);
        let model = QuadraticModel { inner: TestbedLinearModel::new(&p, &d) };
        let params = vec![0.2; 16];
        let dir: Vec<f64> = (0..16).map(|i| 1.0 / (1.0 + i as f64)).collect();
        let h_grid = [1e-1, 1e-2, 1e-3, 1e-4];
        let order = frechet_check(&model, &params, &dir, 2, &h_grid);
        assert!((order - 1.0).abs() < 1e-3, "order {order}");
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let p = problem(0.0, 16, 11);
        let d = sample_dataset(&p, 20, 12);
        let model = QuadraticModel { inner: TestbedLinearModel::new(&p, &d) };
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let params: Vec<f64> = (0..16).map(|_| rng.random_range(-0.5..0.5)).collect();
            let dir: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let gap = jacobian_fd_gap(&model, &params, &dir, 1e-5);
            assert!(gap <= 1e-5, "fd gap {gap:.3e}");
        }
    }

    #[test]
    fn apriori_rules_evaluate() {
        let (l, ok) = nonlinear_apriori_lambda(0.5, 1.0, 1.0, 1.0, 100);
        assert!((l - 0.1f64.powf(2.0 / 3.0)).abs() < 1e-12);
        assert!(ok);
        let (_, ok) = nonlinear_apriori_lambda(0.3, 1.0, 1.0, 1.0, 100);
        assert!(!ok);
        // Doubling R halves the base ratio.
        let (l1, _) = nonlinear_apriori_lambda(0.5, 1.0, 1.0, 1.0, 400);
        let (l2, _) = nonlinear_apriori_lambda(0.5, 1.0, 1.0, 2.0, 100);
        assert!((l1 - l2).abs() < 1e-12);
        // Hilbert-scale exponent arithmetic: p = 1, s = 1, b = 1/2 gives
        // lambda = m^(-2/3).
        let l = nonlinear_apriori_lambda_hs(1.0, 1.0, 0.5, 100);
        assert!((l - 100f64.powf(-2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn box_constraints_respected() {
        let p = problem(0.4, 16, 14);
        let d = sample_dataset(&p, 20, 15);
        let (est, _) = {
            let model = TestbedLinearModel::new(&p, &d);
            let opts = NlOptions {
                bounds: Some((vec![0.0; 16], vec![f64::INFINITY; 16])),
                ..Default::default()
            };
            let (params, report) = nonlinear_tikhonov(
                &model,
                &d.ys,
                &PenaltyMetric::Identity,
                0.01,
                &vec![0.1; 16],
                &opts,
            );
            (Estimate::from_coeffs(params), report)
        };
        assert!(est.coeffs.iter().all(|&c| c >= 0.0));
    }
}
