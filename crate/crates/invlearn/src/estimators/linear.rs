//! Linear-problem estimators: spectral filtering via the kernel Gram matrix
//! or directly in the truncated eigenbasis, the Hilbert-scale variant,
//! least-squares projection onto nested subspaces, and norm truncation.

use crate::filters::{apply_filter, FilterError, FilterKind, SpectralFilter};
use crate::linalg::{
    axpy, dot, norm2, Cholesky, EigenDecomposition, LinalgError, SymMatrix, DEFAULT_RANK_TOL,
};
use crate::testbed::{Dataset, Estimate, HilbertScaleSpec, SpectralProblem};
use std::sync::OnceLock;
use thiserror::Error;

/// Cost guard for assembling the full J x J empirical operator.
pub const DIRECT_PATH_MAX_MODES: usize = 500;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("direct path requires J <= {max}, problem has {got} modes")]
    TruncationTooLarge { max: usize, got: usize },
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Normalized kernel Gram matrix `(1/m) K_A(x_i, x_j)`.
///
/// Its spectrum lies in `[0, kappa^2]`, so spectral filters apply directly.
#[derive(Debug, Clone)]
pub struct KernelGram {
    pub m: usize,
    pub matrix: SymMatrix,
}

impl KernelGram {
    pub fn new(problem: &SpectralProblem, dataset: &Dataset) -> Self {
        let m = dataset.m;
        let features: Vec<Vec<f64>> = dataset
            .xs
            .iter()
            .map(|&x| {
                let mut row = vec![0.0; problem.modes];
                problem.feature_row(x, &mut row);
                row
            })
            .collect();
        let matrix =
            SymMatrix::from_fn(m, |i, j| dot(&features[i], &features[j]) / m as f64);
        Self { m, matrix }
    }
}

/// Empirical operator `T_x = B_x* B_x` and data image `B_x* y` assembled in
/// the truncated eigenbasis. Shared by the direct spectral path, the
/// Hilbert-scale path and the data-driven parameter selection rules.
#[derive(Debug)]
pub struct SpectralDesign {
    pub modes: usize,
    pub m: usize,
    t_x: SymMatrix,
    bty: Vec<f64>,
    eig: OnceLock<EigenDecomposition>,
}

impl SpectralDesign {
    pub fn new(problem: &SpectralProblem, dataset: &Dataset) -> Result<Self, EstimatorError> {
        if problem.modes > DIRECT_PATH_MAX_MODES {
            return Err(EstimatorError::TruncationTooLarge {
                max: DIRECT_PATH_MAX_MODES,
                got: problem.modes,
            });
        }
        let j = problem.modes;
        let m = dataset.m;
        let mut upper = vec![0.0; j * j];
        let mut bty = vec![0.0; j];
        let mut row = vec![0.0; j];
        for (&x, &y) in dataset.xs.iter().zip(&dataset.ys) {
            problem.feature_row(x, &mut row);
            for a in 0..j {
                let ra = row[a];
                axpy(ra, &row[a..], &mut upper[a * j + a..a * j + j]);
            }
            axpy(y, &row, &mut bty);
        }
        let inv_m = 1.0 / m as f64;
        for a in 0..j {
            for b in a..j {
                let v = upper[a * j + b] * inv_m;
                upper[a * j + b] = v;
                upper[b * j + a] = v;
            }
        }
        for v in bty.iter_mut() {
            *v *= inv_m;
        }
        let t_x = SymMatrix::new(j, upper).expect("symmetric by construction");
        Ok(Self { modes: j, m, t_x, bty, eig: OnceLock::new() })
    }

    pub fn t_x(&self) -> &SymMatrix {
        &self.t_x
    }

    pub fn bty(&self) -> &[f64] {
        &self.bty
    }

    pub fn eigendecomposition(&self) -> Result<&EigenDecomposition, EstimatorError> {
        if let Some(eig) = self.eig.get() {
            return Ok(eig);
        }
        let eig = crate::linalg::sym_eigendecompose(&self.t_x)?;
        Ok(self.eig.get_or_init(|| eig))
    }

    /// Direct-path estimate `g_lambda(T_x) B_x* y`.
    ///
    /// Iterated Tikhonov goes through nested Cholesky solves; every other
    /// filter reuses the cached eigendecomposition of `T_x`.
    pub fn estimate(
        &self,
        filter: &SpectralFilter,
        lambda: f64,
    ) -> Result<Estimate, EstimatorError> {
        if let FilterKind::IteratedTikhonov { l } = filter.kind {
            let coeffs = tikhonov_solve(&self.t_x, &self.bty, lambda, l)?;
            return Ok(Estimate::from_coeffs(coeffs));
        }
        let eig = self.eigendecomposition()?;
        let coeffs = crate::filters::apply_filter_to_eig(filter, lambda, eig, &self.bty)?;
        Ok(Estimate::from_coeffs(coeffs))
    }

    /// Effective dimension of the empirical operator,
    /// `Tr((T_x + lambda)^(-1) T_x)`; equals the Gram-side trace because the
    /// nonzero spectra coincide.
    pub fn empirical_effective_dimension(&self, lambda: f64) -> Result<f64, EstimatorError> {
        let eig = self.eigendecomposition()?;
        Ok(eig
            .eigenvalues
            .iter()
            .map(|&w| {
                let w = w.max(0.0);
                w / (w + lambda)
            })
            .sum())
    }

    /// Intermediate-norm gap `||(T_x + lambda)^(1/2)(e1 - e2)||`, evaluated
    /// as a quadratic form so no eigendecomposition is needed.
    pub fn weighted_gap_norm(&self, e1: &Estimate, e2: &Estimate, lambda: f64) -> f64 {
        let diff: Vec<f64> =
            e1.coeffs.iter().zip(&e2.coeffs).map(|(a, b)| a - b).collect();
        (self.t_x.quad_form(&diff) + lambda * dot(&diff, &diff)).max(0.0).sqrt()
    }

    /// Empirical risk `(1/m) sum (B_x f - y)^2` of coefficients `f`.
    pub fn empirical_risk(&self, problem: &SpectralProblem, dataset: &Dataset, est: &Estimate) -> f64 {
        let mut row = vec![0.0; problem.modes];
        let mut acc = 0.0;
        for (&x, &y) in dataset.xs.iter().zip(&dataset.ys) {
            problem.feature_row(x, &mut row);
            let pred = dot(&row, &est.coeffs);
            acc += (pred - y) * (pred - y);
        }
        acc / dataset.m as f64
    }
}

/// Iterated Tikhonov `g_lambda(M) rhs` as `l` nested solves with one
/// Cholesky factorization of `M + lambda I`.
fn tikhonov_solve(
    matrix: &SymMatrix,
    rhs: &[f64],
    lambda: f64,
    l: u32,
) -> Result<Vec<f64>, EstimatorError> {
    let chol = Cholesky::new(matrix, lambda)?;
    let mut x = vec![0.0; rhs.len()];
    for _ in 0..l {
        let mut shifted = rhs.to_vec();
        axpy(lambda, &x, &mut shifted);
        x = chol.solve(&shifted);
    }
    Ok(x)
}

/// Applies `g_lambda(M)` to `rhs`, choosing the Cholesky path for iterated
/// Tikhonov and the eigendecomposition path otherwise.
fn filtered_apply(
    matrix: &SymMatrix,
    rhs: &[f64],
    filter: &SpectralFilter,
    lambda: f64,
) -> Result<Vec<f64>, EstimatorError> {
    if let FilterKind::IteratedTikhonov { l } = filter.kind {
        return tikhonov_solve(matrix, rhs, lambda, l);
    }
    Ok(apply_filter(filter, lambda, matrix, rhs)?)
}

/// Kernel-path spectral estimator: representer weights
/// `alpha = g_lambda((1/m) K) y` pulled back to basis coefficients through
/// `B_x*`.
pub fn spectral_estimate(
    problem: &SpectralProblem,
    dataset: &Dataset,
    filter: &SpectralFilter,
    lambda: f64,
) -> Result<Estimate, EstimatorError> {
    assert!(lambda > 0.0);
    let gram = KernelGram::new(problem, dataset);
    let alpha = apply_filter(filter, lambda, &gram.matrix, &dataset.ys)?;
    let mut coeffs = vec![0.0; problem.modes];
    let mut row = vec![0.0; problem.modes];
    let inv_m = 1.0 / dataset.m as f64;
    for (&x, &a) in dataset.xs.iter().zip(&alpha) {
        problem.feature_row(x, &mut row);
        axpy(a * inv_m, &row, &mut coeffs);
    }
    Ok(Estimate { coeffs, repr_coeffs: Some(alpha) })
}

/// Direct-path spectral estimator `g_lambda(T_x) B_x* y` in the truncated
/// eigenbasis; the oracle counterpart of [`spectral_estimate`].
pub fn spectral_estimate_direct(
    problem: &SpectralProblem,
    dataset: &Dataset,
    filter: &SpectralFilter,
    lambda: f64,
) -> Result<Estimate, EstimatorError> {
    assert!(lambda > 0.0);
    let design = SpectralDesign::new(problem, dataset)?;
    design.estimate(filter, lambda)
}

/// Hilbert-scale estimator `L^-1 g_lambda(L^-1 T_x L^-1) L^-1 B_x* y`,
/// computed diagonally with `L = diag(j^w)`.
pub fn hilbert_scale_estimate(
    problem: &SpectralProblem,
    dataset: &Dataset,
    scale: &HilbertScaleSpec,
    filter: &SpectralFilter,
    lambda: f64,
) -> Result<Estimate, EstimatorError> {
    assert!(lambda > 0.0);
    let design = SpectralDesign::new(problem, dataset)?;
    hilbert_scale_estimate_with(&design, scale, filter, lambda)
}

/// Same as [`hilbert_scale_estimate`] but reusing an assembled design.
pub fn hilbert_scale_estimate_with(
    design: &SpectralDesign,
    scale: &HilbertScaleSpec,
    filter: &SpectralFilter,
    lambda: f64,
) -> Result<Estimate, EstimatorError> {
    let j = design.modes;
    assert_eq!(scale.weights.len(), j);
    let inv_l: Vec<f64> = scale.weights.iter().map(|w| 1.0 / w).collect();
    let s = SymMatrix::from_fn(j, |a, b| design.t_x.get(a, b) * inv_l[a] * inv_l[b]);
    let rhs: Vec<f64> = design.bty.iter().zip(&inv_l).map(|(v, w)| v * w).collect();
    let u = filtered_apply(&s, &rhs, filter, lambda)?;
    let coeffs: Vec<f64> = u.iter().zip(&inv_l).map(|(v, w)| v * w).collect();
    Ok(Estimate::from_coeffs(coeffs))
}

#[derive(Debug, Clone, Copy)]
pub struct ProjectionReport {
    /// Smallest eigenvalue of the normal matrix fell below
    /// `1e-12` times the largest; the pseudoinverse picked the minimum-norm
    /// solution.
    pub rank_deficient: bool,
    pub empirical_residual: f64,
}

/// Least-squares estimator over the span of the first `n` basis elements:
/// solves the `n x n` normal equations by pseudoinverse and zero-pads.
pub fn projection_estimate(
    problem: &SpectralProblem,
    dataset: &Dataset,
    n: usize,
) -> Result<(Estimate, ProjectionReport), EstimatorError> {
    assert!(n >= 1 && n <= dataset.m.min(problem.modes), "subspace dimension out of range");
    let m = dataset.m;
    // Design rows restricted to the leading n features.
    let mut rows = vec![0.0; m * n];
    let mut full = vec![0.0; problem.modes];
    for (i, &x) in dataset.xs.iter().enumerate() {
        problem.feature_row(x, &mut full);
        rows[i * n..(i + 1) * n].copy_from_slice(&full[..n]);
    }
    let inv_m = 1.0 / m as f64;
    let normal = SymMatrix::from_fn(n, |a, b| {
        let mut s = 0.0;
        for i in 0..m {
            s += rows[i * n + a] * rows[i * n + b];
        }
        s * inv_m
    });
    let mut rhs = vec![0.0; n];
    for (i, &y) in dataset.ys.iter().enumerate() {
        axpy(y * inv_m, &rows[i * n..(i + 1) * n], &mut rhs);
    }
    let eig = crate::linalg::sym_eigendecompose(&normal)?;
    let w_max = eig.eigenvalues.first().copied().unwrap_or(0.0).max(0.0);
    let w_min = eig.eigenvalues.last().copied().unwrap_or(0.0);
    let rank_deficient = w_min < DEFAULT_RANK_TOL * w_max;
    let c = eig.apply_function(&rhs, |w| {
        if w > DEFAULT_RANK_TOL * w_max && w > 0.0 {
            1.0 / w
        } else {
            0.0
        }
    });

    let mut coeffs = vec![0.0; problem.modes];
    coeffs[..n].copy_from_slice(&c);
    let mut residual = 0.0;
    for i in 0..m {
        let pred = dot(&rows[i * n..(i + 1) * n], &c);
        residual += (pred - dataset.ys[i]) * (pred - dataset.ys[i]);
    }
    residual = (residual * inv_m).sqrt();
    Ok((
        Estimate::from_coeffs(coeffs),
        ProjectionReport { rank_deficient, empirical_residual: residual },
    ))
}

/// Norm truncation: returns the estimate unchanged when `||f|| <= r_hat`,
/// otherwise the zero estimate.
pub fn truncate_estimate(est: &Estimate, r_hat: f64) -> Estimate {
    assert!(r_hat >= 0.0);
    if est.norm() <= r_hat {
        est.clone()
    } else {
        Estimate::zero(est.coeffs.len())
    }
}

/// Truncation radius `C (Sigma / sigma_min(P_n T P_n) + 1)`; on the diagonal
/// testbed `sigma_min(P_n T P_n) = sigma_n` exactly.
pub fn truncation_radius(problem: &SpectralProblem, n: usize, c: f64) -> f64 {
    assert!(n >= 1 && n <= problem.modes);
    c * (problem.sigma_noise / problem.sigma[n - 1] + 1.0)
}

/// Landweber iterates `f_{t+1} = f_t + eta (B_x* y - T_x f_t)` in the
/// truncated basis, starting from zero. The first yielded item is the zero
/// initial iterate.
pub struct LandweberIterates {
    design: SpectralDesign,
    eta: f64,
    state: Vec<f64>,
    emitted: usize,
    max_iters: usize,
}

impl LandweberIterates {
    pub fn new(
        problem: &SpectralProblem,
        dataset: &Dataset,
        eta: f64,
        max_iters: usize,
    ) -> Result<Self, EstimatorError> {
        assert!(eta > 0.0);
        let design = SpectralDesign::new(problem, dataset)?;
        let modes = design.modes;
        Ok(Self { design, eta, state: vec![0.0; modes], emitted: 0, max_iters })
    }

    pub fn design(&self) -> &SpectralDesign {
        &self.design
    }
}

impl Iterator for LandweberIterates {
    type Item = Estimate;

    fn next(&mut self) -> Option<Self::Item> {
        if self.emitted > self.max_iters {
            return None;
        }
        let current = Estimate::from_coeffs(self.state.clone());
        // Advance for the next call.
        let grad = self.design.t_x.matvec(&self.state);
        for ((s, g), b) in self.state.iter_mut().zip(&grad).zip(self.design.bty()) {
            *s += self.eta * (b - g);
        }
        self.emitted += 1;
        Some(current)
    }
}

/// Relative H-norm gap used by the equivalence tests:
/// `||a - b|| / (1 + ||b||)`.
pub fn relative_h_gap(a: &Estimate, b: &Estimate) -> f64 {
    let diff: Vec<f64> = a.coeffs.iter().zip(&b.coeffs).map(|(x, y)| x - y).collect();
    norm2(&diff) / (1.0 + norm2(&b.coeffs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{norm2, solve_least_squares};
    use crate::testbed::{
        build_spectral_problem, h_norm_error, make_hilbert_scale, sample_dataset, ProblemConfig,
        SourceProfile,
    };

    fn problem(b: f64, r: f64, noise: f64, modes: usize, seed: u64) -> SpectralProblem {
        build_spectral_problem(&ProblemConfig {
            b,
            beta: 1.0,
            r,
            source_radius: 1.0,
            sigma_noise: noise,
            modes,
            seed,
            source: SourceProfile::Sphere,
        })
        .unwrap()
    }

    #[test]
    fn gram_is_psd_with_bounded_spectrum() {
        let p = problem(0.5, 0.5, 1.0, 64, 1);
        let d = sample_dataset(&p, 30, 2);
        let gram = KernelGram::new(&p, &d);
        let eig = crate::linalg::sym_eigendecompose(&gram.matrix).unwrap();
        for &w in &eig.eigenvalues {
            assert!(w >= -1e-10, "negative eigenvalue {w}");
            assert!(w <= p.kappa_sq + 1e-9, "eigenvalue above kappa^2");
        }
    }

    #[test]
    fn noiseless_interpolation_with_tsvd() {
        // m = J with noiseless data: the estimator interpolates exactly.
        let p = problem(0.5, 0.5, 0.0, 16, 3);
        let d = sample_dataset(&p, 16, 97);
        let gram = KernelGram::new(&p, &d);
        let eig = crate::linalg::sym_eigendecompose(&gram.matrix).unwrap();
        let w_min = eig.eigenvalues.last().copied().unwrap();
        let w_max = eig.eigenvalues[0];
        assert!(w_min > 1e-5 * w_max, "design too ill-conditioned for this seed");
        let filter = SpectralFilter::tsvd(p.kappa_sq);
        let est = spectral_estimate(&p, &d, &filter, w_min * 0.5).unwrap();
        let err = h_norm_error(&p, &est).unwrap();
        assert!(err <= 1e-6 * p.source_radius, "error {err:.3e}");
    }

    #[test]
    fn over_regularization_kills_estimate() {
        let p = problem(0.5, 0.5, 1.0, 32, 4);
        let d = sample_dataset(&p, 40, 5);
        let lambda = 1e6 * p.kappa_sq;
        let filter = SpectralFilter::tikhonov(1, p.kappa_sq);
        let est = spectral_estimate(&p, &d, &filter, lambda).unwrap();
        let y_norm_m = (d.ys.iter().map(|y| y * y).sum::<f64>() / d.m as f64).sqrt();
        let bound = p.kappa_sq.sqrt() * y_norm_m / lambda;
        assert!(est.norm() <= bound * (1.0 + 1e-9));
        assert!(est.norm() < 1e-5);
    }

    #[test]
    fn kernel_and_direct_paths_agree() {
        let filters: Vec<Box<dyn Fn(&SpectralProblem) -> SpectralFilter>> = vec![
            Box::new(|p| SpectralFilter::tikhonov(1, p.kappa_sq)),
            Box::new(|p| SpectralFilter::tikhonov(2, p.kappa_sq)),
            Box::new(|p| SpectralFilter::tsvd(p.kappa_sq)),
            Box::new(|p| SpectralFilter::landweber(1.0 / p.kappa_sq, p.kappa_sq).unwrap()),
        ];
        for (i, mk) in filters.iter().enumerate() {
            let p = problem(0.5, 0.5, 0.5, 50, 10 + i as u64);
            let d = sample_dataset(&p, 20, 20 + i as u64);
            let filter = mk(&p);
            let lambda = 0.05 * p.kappa_sq;
            let kernel_path = spectral_estimate(&p, &d, &filter, lambda).unwrap();
            let direct = spectral_estimate_direct(&p, &d, &filter, lambda).unwrap();
            let gap = relative_h_gap(&kernel_path, &direct);
            assert!(gap <= 1e-8, "filter {i}: relative gap {gap:.3e}");
        }
    }

    #[test]
    fn direct_path_zero_data_gives_zero() {
        let mut p = problem(0.5, 0.5, 0.0, 32, 6);
        p.ftrue = vec![0.0; p.modes];
        let p = crate::testbed::build_problem_from_parts(
            p.sigma.clone(),
            vec![0.0; p.modes],
            p.b,
            p.beta,
            p.r,
            p.source_radius,
            0.0,
            p.seed,
        );
        let d = sample_dataset(&p, 25, 7);
        let filter = SpectralFilter::tikhonov(1, p.kappa_sq);
        let est = spectral_estimate_direct(&p, &d, &filter, 0.1).unwrap();
        assert_eq!(est.coeffs, vec![0.0; p.modes]);
    }

    #[test]
    fn tikhonov_satisfies_normal_equation() {
        let p = problem(0.5, 0.5, 1.0, 48, 8);
        let d = sample_dataset(&p, 60, 9);
        let design = SpectralDesign::new(&p, &d).unwrap();
        let lambda = 0.03;
        let filter = SpectralFilter::tikhonov(1, p.kappa_sq);
        let est = design.estimate(&filter, lambda).unwrap();
        let mut lhs = design.t_x().matvec(&est.coeffs);
        axpy(lambda, &est.coeffs, &mut lhs);
        let res: Vec<f64> = lhs.iter().zip(design.bty()).map(|(a, b)| a - b).collect();
        assert!(norm2(&res) <= 1e-9, "residual {:.3e}", norm2(&res));
    }

    #[test]
    fn truncation_guard_fires() {
        let p = problem(0.5, 0.5, 1.0, 501, 1);
        let d = sample_dataset(&p, 10, 1);
        let filter = SpectralFilter::tikhonov(1, p.kappa_sq);
        assert!(matches!(
            spectral_estimate_direct(&p, &d, &filter, 0.1),
            Err(EstimatorError::TruncationTooLarge { .. })
        ));
    }

    #[test]
    fn hilbert_scale_degenerates_to_direct_at_w_zero() {
        let p = problem(0.5, 0.5, 0.5, 40, 11);
        let d = sample_dataset(&p, 30, 12);
        let scale = HilbertScaleSpec {
            a: 0.25,
            gamma: 2.0,
            w: 0.0,
            weights: vec![1.0; p.modes],
        };
        let filter = SpectralFilter::tikhonov(1, p.kappa_sq);
        let hs = hilbert_scale_estimate(&p, &d, &scale, &filter, 0.05).unwrap();
        let direct = spectral_estimate_direct(&p, &d, &filter, 0.05).unwrap();
        let gap: Vec<f64> =
            hs.coeffs.iter().zip(&direct.coeffs).map(|(a, b)| a - b).collect();
        assert!(norm2(&gap) <= 1e-10 * (1.0 + norm2(&direct.coeffs)));
    }

    #[test]
    fn hilbert_scale_normal_equation() {
        let p = problem(0.5, 0.5, 0.5, 40, 13);
        let d = sample_dataset(&p, 50, 14);
        let scale = make_hilbert_scale(&p, 0.25).unwrap();
        let lambda = 0.02;
        let filter = SpectralFilter::tikhonov(1, p.kappa_sq);
        let est = hilbert_scale_estimate(&p, &d, &scale, &filter, lambda).unwrap();
        // With u = L f: (S + lambda) u = L^-1 B_x* y.
        let design = SpectralDesign::new(&p, &d).unwrap();
        let inv_l: Vec<f64> = scale.weights.iter().map(|w| 1.0 / w).collect();
        let s = SymMatrix::from_fn(p.modes, |a, b| design.t_x().get(a, b) * inv_l[a] * inv_l[b]);
        let u: Vec<f64> = est.coeffs.iter().zip(&scale.weights).map(|(c, w)| c * w).collect();
        let mut lhs = s.matvec(&u);
        axpy(lambda, &u, &mut lhs);
        let rhs: Vec<f64> = design.bty().iter().zip(&inv_l).map(|(v, w)| v * w).collect();
        let res: Vec<f64> = lhs.iter().zip(&rhs).map(|(a, b)| a - b).collect();
        assert!(norm2(&res) <= 1e-9, "residual {:.3e}", norm2(&res));
    }

    #[test]
    fn oversmoothing_error_decreases_in_sample_size() {
        // Hilbert-scale estimator in the oversmoothing regime: average error
        // over replicates decreases along m = 128, 512, 2048.
        let a = 0.25;
        let s = 0.5;
        let b = 0.5;
        let r = s * a / (1.0 - 2.0 * a); // source exponent matching L^-s
        let p = build_spectral_problem(&ProblemConfig {
            b,
            beta: 1.0,
            r,
            source_radius: 1.0,
            sigma_noise: 0.3,
            modes: 64,
            seed: 77,
            source: SourceProfile::Boundary,
        })
        .unwrap();
        let scale = make_hilbert_scale(&p, a).unwrap();
        let filter = SpectralFilter::tikhonov(1, p.kappa_sq);
        let replicates = 50;
        let mut means = Vec::new();
        for (mi, &m) in [128usize, 512, 2048].iter().enumerate() {
            let lambda = (p.sigma_noise / (p.source_radius * (m as f64).sqrt()))
                .powf(2.0 / (b + 1.0));
            let mut acc = 0.0;
            for k in 0..replicates {
                let d = sample_dataset(&p, m, 1000 + (mi * replicates + k) as u64);
                let est = hilbert_scale_estimate(&p, &d, &scale, &filter, lambda).unwrap();
                acc += h_norm_error(&p, &est).unwrap();
            }
            means.push(acc / replicates as f64);
        }
        assert!(means[0] > means[1] && means[1] > means[2], "means {means:?}");
    }

    #[test]
    fn projection_scalar_normal_equation() {
        let p = problem(0.5, 0.5, 0.4, 32, 15);
        let d = sample_dataset(&p, 25, 16);
        let (est, _) = projection_estimate(&p, &d, 1).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for (&x, &y) in d.xs.iter().zip(&d.ys) {
            let phi = p.sigma[0].sqrt() * crate::testbed::basis_eval(1, x);
            num += phi * y;
            den += phi * phi;
        }
        assert!((est.coeffs[0] - num / den).abs() <= 1e-10 * (1.0 + (num / den).abs()));
        assert!(est.coeffs[1..].iter().all(|&c| c == 0.0));
    }

    #[test]
    fn projection_interpolates_in_square_noiseless_regime() {
        // Ground truth inside V_n, noiseless data, n = m: zero residual.
        let base = problem(0.5, 0.5, 0.0, 32, 17);
        let n = 8;
        let mut ftrue = vec![0.0; base.modes];
        for (j, f) in ftrue.iter_mut().enumerate().take(n) {
            *f = 1.0 / (j + 1) as f64;
        }
        let p = crate::testbed::build_problem_from_parts(
            base.sigma.clone(),
            ftrue,
            base.b,
            base.beta,
            base.r,
            base.source_radius,
            0.0,
            base.seed,
        );
        let d = sample_dataset(&p, n, 18);
        let (_, report) = projection_estimate(&p, &d, n).unwrap();
        assert!(report.empirical_residual <= 1e-8, "residual {:.3e}", report.empirical_residual);
    }

    #[test]
    fn projection_matches_gram_side_pseudoinverse() {
        // Independent oracle: c = Psi' (Psi Psi')^+ y via the m x m Gram.
        let p = problem(0.5, 0.5, 0.3, 32, 19);
        let m = 12;
        let n = 5;
        let d = sample_dataset(&p, m, 20);
        let (est, _) = projection_estimate(&p, &d, n).unwrap();

        let mut rows = vec![0.0; m * n];
        let mut full = vec![0.0; p.modes];
        for (i, &x) in d.xs.iter().enumerate() {
            p.feature_row(x, &mut full);
            rows[i * n..(i + 1) * n].copy_from_slice(&full[..n]);
        }
        let gram = SymMatrix::from_fn(m, |i, j| {
            dot(&rows[i * n..(i + 1) * n], &rows[j * n..(j + 1) * n])
        });
        let w = solve_least_squares(&gram, &d.ys, 1e-12).unwrap();
        let mut oracle = vec![0.0; n];
        for i in 0..m {
            axpy(w[i], &rows[i * n..(i + 1) * n], &mut oracle);
        }
        let gap: Vec<f64> = est.coeffs[..n].iter().zip(&oracle).map(|(a, b)| a - b).collect();
        assert!(norm2(&gap) <= 1e-8 * (1.0 + norm2(&oracle)), "gap {:.3e}", norm2(&gap));
    }

    #[test]
    fn projection_residual_non_increasing_in_n() {
        let p = problem(0.5, 0.5, 0.0, 32, 21);
        let d = sample_dataset(&p, 24, 22);
        let mut prev = f64::INFINITY;
        for n in 1..=12 {
            let (_, report) = projection_estimate(&p, &d, n).unwrap();
            assert!(report.empirical_residual <= prev + 1e-12, "n={n}");
            prev = report.empirical_residual;
        }
    }

    #[test]
    fn truncation_basics() {
        let small = Estimate::from_coeffs(vec![0.3, 0.4]);
        assert_eq!(truncate_estimate(&small, 1.0), small);
        let large = Estimate::from_coeffs(vec![2.0, 0.0]);
        assert_eq!(truncate_estimate(&large, 1.0), Estimate::zero(2));
    }

    #[test]
    fn truncation_radius_never_fires_on_noiseless_fits() {
        let p = problem(0.5, 0.5, 0.0, 32, 23);
        let n = 6;
        let c = 4.0 * (1.0 + p.source_radius);
        let r_hat = truncation_radius(&p, n, c);
        for k in 0..100 {
            let d = sample_dataset(&p, 40, 500 + k);
            let (est, _) = projection_estimate(&p, &d, n).unwrap();
            assert!(est.norm() <= r_hat, "replicate {k}: {} > {r_hat}", est.norm());
            let kept = truncate_estimate(&est, r_hat);
            assert_eq!(kept, est);
        }
    }

    #[test]
    fn spectral_estimate_linear_in_y() {
        let p = problem(0.5, 0.5, 1.0, 32, 24);
        let d1 = sample_dataset(&p, 20, 25);
        let mut d2 = sample_dataset(&p, 20, 26);
        d2.xs = d1.xs.clone(); // shared design
        let mut dsum = d1.clone();
        for (y, y2) in dsum.ys.iter_mut().zip(&d2.ys) {
            *y += y2;
        }
        let filter = SpectralFilter::tikhonov(1, p.kappa_sq);
        let e1 = spectral_estimate(&p, &d1, &filter, 0.1).unwrap();
        let e2 = spectral_estimate(&p, &d2, &filter, 0.1).unwrap();
        let esum = spectral_estimate(&p, &dsum, &filter, 0.1).unwrap();
        for j in 0..p.modes {
            assert!(
                (esum.coeffs[j] - e1.coeffs[j] - e2.coeffs[j]).abs() <= 1e-10,
                "coefficient {j}"
            );
        }
    }

    #[test]
    fn landweber_stream_reaches_small_residual_on_noiseless_data() {
        let p = problem(0.5, 1.0, 0.0, 24, 27);
        let d = sample_dataset(&p, 48, 28);
        let eta = 1.0 / p.kappa_sq;
        let stream = LandweberIterates::new(&p, &d, eta, 2000).unwrap();
        let mut first_residual = None;
        let mut last_residual = f64::INFINITY;
        let design = SpectralDesign::new(&p, &d).unwrap();
        for (t, est) in stream.enumerate() {
            let r = design.empirical_risk(&p, &d, &est).sqrt();
            if t == 0 {
                first_residual = Some(r);
            }
            last_residual = r;
        }
        assert!(first_residual.unwrap() > last_residual * 10.0);
        assert!(last_residual < 1e-3, "terminal residual {last_residual:.3e}");
    }
}
