//! Synthetic diagonal inverse problem with exactly controllable
//! ill-posedness.
//!
//! The covariance operator is diagonalized by the cosine basis
//! `phi_j(x) = sqrt(2) cos(j pi x)` on `[0, 1]` with uniform design, so its
//! eigenvalues `sigma_j = beta j^(-1/b)` are known exactly and every
//! ground-truth quantity (reconstruction error, effective dimension,
//! distance function) has a closed or directly computable form.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TestbedError {
    #[error("decay exponent b = {0} outside (0, 1)")]
    InvalidDecay(f64),
    #[error("basis truncation J = {0} below the minimum of 16")]
    InvalidTruncation(usize),
    #[error("dimension mismatch: problem has {expected} modes, estimate has {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("regularization parameter must be positive, got {0}")]
    NonPositiveLambda(f64),
    #[error("link parameter a = {0} outside (0, 1/2)")]
    InvalidLinkParameter(f64),
}

/// How the source vector `v` in `ftrue = sigma^r v` distributes its mass.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceProfile {
    /// Seeded uniform direction on the sphere of radius `R`; mass spreads
    /// evenly over all modes.
    #[default]
    Sphere,
    /// Coefficients proportional to `j^(-1/2)` with seeded signs, scaled to
    /// norm `R`; places mass like the boundary of the source class, which is
    /// what attains bias-limited rates at moderate sample sizes.
    Boundary,
}

/// Configuration for [`build_spectral_problem`], the JSON problem format.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ProblemConfig {
    pub b: f64,
    pub beta: f64,
    pub r: f64,
    #[serde(rename = "R")]
    pub source_radius: f64,
    pub sigma_noise: f64,
    #[serde(rename = "J")]
    pub modes: usize,
    pub seed: u64,
    #[serde(default)]
    pub source: SourceProfile,
}

/// Diagonal synthetic inverse problem; the ground-truth oracle for every
/// experiment.
#[derive(Debug, Clone)]
pub struct SpectralProblem {
    /// Basis truncation J.
    pub modes: usize,
    /// Eigenvalues of the covariance operator, descending.
    pub sigma: Vec<f64>,
    /// Decay exponent: `sigma_j = beta * j^(-1/b)`.
    pub b: f64,
    pub beta: f64,
    /// Lower decay constant; `beta / 2` by construction.
    pub alpha: f64,
    /// Source smoothness exponent.
    pub r: f64,
    /// Source norm bound R.
    pub source_radius: f64,
    /// Ground-truth coefficients in the eigenbasis.
    pub ftrue: Vec<f64>,
    /// Noise scale.
    pub sigma_noise: f64,
    /// Bernstein constant of the noise law; equals `sigma_noise` for
    /// Gaussian noise.
    pub m_noise: f64,
    /// Kernel sup bound `kappa^2 = sup_x K_A(x, x)`.
    pub kappa_sq: f64,
    pub seed: u64,
    /// Cached forward coefficients `sqrt(sigma_j) * ftrue_j`.
    g_coeffs: Vec<f64>,
}

/// I.i.d. random-design sample together with the seed that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub m: usize,
    pub seed: u64,
}

impl Dataset {
    /// CSV export with `x,y` columns.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y\n");
        for (x, y) in self.xs.iter().zip(&self.ys) {
            out.push_str(&format!("{x},{y}\n"));
        }
        out
    }
}

/// Diagonal action of the Hilbert-scale generator `L` on the eigenbasis.
#[derive(Debug, Clone)]
pub struct HilbertScaleSpec {
    /// Link parameter the scale was constructed for.
    pub a: f64,
    /// `gamma = 1/a - 2`.
    pub gamma: f64,
    /// Weight exponent: `L e_j = j^w e_j`.
    pub w: f64,
    /// `weights[j-1] = j^w`, strictly increasing and unbounded.
    pub weights: Vec<f64>,
}

/// A reconstructed element of H stored in the testbed eigenbasis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub coeffs: Vec<f64>,
    /// Representer weights when the estimate came from the kernel path.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub repr_coeffs: Option<Vec<f64>>,
}

impl Estimate {
    pub fn from_coeffs(coeffs: Vec<f64>) -> Self {
        Self { coeffs, repr_coeffs: None }
    }

    pub fn zero(modes: usize) -> Self {
        Self::from_coeffs(vec![0.0; modes])
    }

    pub fn norm(&self) -> f64 {
        crate::linalg::norm2(&self.coeffs)
    }
}

/// Basis function `phi_j(x) = sqrt(2) cos(j pi x)`, orthonormal in
/// `L2(uniform[0,1])`.
#[inline]
pub fn basis_eval(j: usize, x: f64) -> f64 {
    std::f64::consts::SQRT_2 * (j as f64 * std::f64::consts::PI * x).cos()
}

/// Writes `phi_1(x) .. phi_J(x)` into `out` using the Chebyshev recurrence
/// `cos((j+1)t) = 2 cos(t) cos(jt) - cos((j-1)t)`.
pub fn basis_row(x: f64, out: &mut [f64]) {
    let theta = std::f64::consts::PI * x;
    let c1 = theta.cos();
    let two_c1 = 2.0 * c1;
    let mut prev = 1.0; // cos(0)
    let mut cur = c1;
    for slot in out.iter_mut() {
        *slot = std::f64::consts::SQRT_2 * cur;
        let next = two_c1 * cur - prev;
        prev = cur;
        cur = next;
    }
}

pub fn build_spectral_problem(config: &ProblemConfig) -> Result<SpectralProblem, TestbedError> {
    if !(config.b > 0.0 && config.b < 1.0) {
        return Err(TestbedError::InvalidDecay(config.b));
    }
    if config.modes < 16 {
        return Err(TestbedError::InvalidTruncation(config.modes));
    }
    assert!(config.r >= 0.0, "source smoothness must be nonnegative");
    assert!(config.source_radius > 0.0, "source radius must be positive");
    assert!(config.sigma_noise >= 0.0, "noise scale must be nonnegative");

    let j_modes = config.modes;
    let sigma: Vec<f64> =
        (1..=j_modes).map(|j| config.beta * (j as f64).powf(-1.0 / config.b)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut v: Vec<f64> = match config.source {
        SourceProfile::Sphere => (0..j_modes).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        SourceProfile::Boundary => (1..=j_modes)
            .map(|j| {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                sign * (j as f64).powf(-0.5)
            })
            .collect(),
    };
    let norm = crate::linalg::norm2(&v);
    for vj in v.iter_mut() {
        *vj *= config.source_radius / norm;
    }
    let ftrue: Vec<f64> =
        sigma.iter().zip(&v).map(|(s, vj)| s.powf(config.r) * vj).collect();

    Ok(finish_problem(
        j_modes,
        sigma,
        config.b,
        config.beta,
        config.r,
        config.source_radius,
        ftrue,
        config.sigma_noise,
        config.seed,
    ))
}

/// Builds a problem from explicit spectra and ground truth. Used for
/// constructions outside the polynomial-decay constructor, e.g. the
/// projection testbed where `sigma_j = j^(-t)` with `t >= 1`.
#[allow(clippy::too_many_arguments)]
pub fn build_problem_from_parts(
    sigma: Vec<f64>,
    ftrue: Vec<f64>,
    b: f64,
    beta: f64,
    r: f64,
    source_radius: f64,
    sigma_noise: f64,
    seed: u64,
) -> SpectralProblem {
    assert_eq!(sigma.len(), ftrue.len());
    assert!(sigma.windows(2).all(|w| w[0] >= w[1] && w[1] > 0.0), "spectrum must be positive descending");
    let modes = sigma.len();
    finish_problem(modes, sigma, b, beta, r, source_radius, ftrue, sigma_noise, seed)
}

/// Projection testbed: `sigma_j = j^(-t)` and ground-truth coefficients
/// `c j^(-(s + 1/2))`, scaled so the tail bound `||(I - P_n) f|| <= R (n+1)^(-s)`
/// holds for every n with equality at n = 0.
pub fn build_projection_problem(
    s: f64,
    t: f64,
    source_radius: f64,
    sigma_noise: f64,
    modes: usize,
    seed: u64,
) -> SpectralProblem {
    assert!(s > 0.0 && t > 0.0);
    let sigma: Vec<f64> = (1..=modes).map(|j| (j as f64).powf(-t)).collect();
    let raw: Vec<f64> = (1..=modes).map(|j| (j as f64).powf(-(s + 0.5))).collect();
    let scale = source_radius / crate::linalg::norm2(&raw);
    let ftrue: Vec<f64> = raw.iter().map(|c| c * scale).collect();
    finish_problem(modes, sigma, 1.0 / t, 1.0, 0.0, source_radius, ftrue, sigma_noise, seed)
}

#[allow(clippy::too_many_arguments)]
fn finish_problem(
    modes: usize,
    sigma: Vec<f64>,
    b: f64,
    beta: f64,
    r: f64,
    source_radius: f64,
    ftrue: Vec<f64>,
    sigma_noise: f64,
    seed: u64,
) -> SpectralProblem {
    let g_coeffs: Vec<f64> = sigma.iter().zip(&ftrue).map(|(s, f)| s.sqrt() * f).collect();
    let mut problem = SpectralProblem {
        modes,
        sigma,
        b,
        beta,
        alpha: beta / 2.0,
        r,
        source_radius,
        ftrue,
        sigma_noise,
        m_noise: sigma_noise,
        kappa_sq: 0.0,
        seed,
        g_coeffs,
    };
    problem.kappa_sq = problem.kernel_sup_bound(10 * modes);
    problem
}

impl SpectralProblem {
    /// `sup_x K_A(x, x)` over an `n`-point grid including both endpoints.
    /// The supremum is attained at `x = 0` for the cosine basis, where every
    /// `cos^2` term equals one.
    fn kernel_sup_bound(&self, n: usize) -> f64 {
        let mut row = vec![0.0; self.modes];
        let mut best: f64 = 0.0;
        for i in 0..n {
            let x = i as f64 / (n - 1) as f64;
            basis_row(x, &mut row);
            let k: f64 = self.sigma.iter().zip(&row).map(|(s, p)| s * p * p).sum();
            best = best.max(k);
        }
        best
    }

    /// Kernel of the image space, `K_A(x, x') = sum_j sigma_j phi_j(x) phi_j(x')`.
    pub fn kernel(&self, x: f64, x2: f64) -> f64 {
        let mut row = vec![0.0; self.modes];
        let mut row2 = vec![0.0; self.modes];
        basis_row(x, &mut row);
        basis_row(x2, &mut row2);
        self.sigma.iter().zip(row.iter().zip(&row2)).map(|(s, (p, p2))| s * p * p2).sum()
    }

    /// Forward value `g(x) = (A f)(x)` for coefficients `f` in the eigenbasis.
    pub fn forward_value(&self, coeffs: &[f64], x: f64) -> f64 {
        assert_eq!(coeffs.len(), self.modes);
        let mut row = vec![0.0; self.modes];
        basis_row(x, &mut row);
        self.sigma
            .iter()
            .zip(coeffs.iter().zip(&row))
            .map(|(s, (c, p))| s.sqrt() * c * p)
            .sum()
    }

    /// Ground-truth forward function `g(x) = (A ftrue)(x)`.
    pub fn g_true(&self, x: f64) -> f64 {
        let mut row = vec![0.0; self.modes];
        basis_row(x, &mut row);
        crate::linalg::dot(&self.g_coeffs, &row)
    }

    /// Feature map row `Phi(x)_j = sqrt(sigma_j) phi_j(x)`; `(A f)(x) = <f, Phi(x)>`.
    pub fn feature_row(&self, x: f64, out: &mut [f64]) {
        basis_row(x, out);
        for (slot, s) in out.iter_mut().zip(&self.sigma) {
            *slot *= s.sqrt();
        }
    }

    pub fn ftrue_estimate(&self) -> Estimate {
        Estimate::from_coeffs(self.ftrue.clone())
    }
}

/// Draws `m` design points uniformly on `[0, 1]` and responses
/// `y = g(x) + eps` with centered Gaussian noise; fully determined by the
/// seed. All design points are drawn before all noise values.
pub fn sample_dataset(problem: &SpectralProblem, m: usize, seed: u64) -> Dataset {
    assert!(m >= 1, "sample size must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| {
            let eps: f64 = rng.sample(StandardNormal);
            problem.g_true(x) + problem.sigma_noise * eps
        })
        .collect();
    Dataset { xs, ys, m, seed }
}

/// Reconstruction error `||est - ftrue||_H` in the eigenbasis.
pub fn h_norm_error(problem: &SpectralProblem, est: &Estimate) -> Result<f64, TestbedError> {
    if est.coeffs.len() != problem.modes {
        return Err(TestbedError::DimensionMismatch {
            expected: problem.modes,
            got: est.coeffs.len(),
        });
    }
    Ok(est
        .coeffs
        .iter()
        .zip(&problem.ftrue)
        .map(|(c, f)| (c - f) * (c - f))
        .sum::<f64>()
        .sqrt())
}

/// Effective dimension `N(lambda) = sum_j sigma_j / (sigma_j + lambda)`.
pub fn effective_dimension(problem: &SpectralProblem, lambda: f64) -> Result<f64, TestbedError> {
    if lambda <= 0.0 {
        return Err(TestbedError::NonPositiveLambda(lambda));
    }
    Ok(problem.sigma.iter().map(|s| s / (s + lambda)).sum())
}

/// Constructs the Hilbert scale linked to the problem: `gamma = 1/a - 2` and
/// `w = 1/(b gamma)`, so that the eigenvalues of `L^-1 T L^-1` are
/// `sigma_j j^(-2w)` and `(sigma_j j^(-2w))^a` tracks `j^(-w)`.
pub fn make_hilbert_scale(
    problem: &SpectralProblem,
    a: f64,
) -> Result<HilbertScaleSpec, TestbedError> {
    if !(a > 0.0 && a < 0.5) {
        return Err(TestbedError::InvalidLinkParameter(a));
    }
    let gamma = 1.0 / a - 2.0;
    let w = 1.0 / (problem.b * gamma);
    let weights: Vec<f64> = (1..=problem.modes).map(|j| (j as f64).powf(w)).collect();
    Ok(HilbertScaleSpec { a, gamma, w, weights })
}

/// Coordinatewise ratios of the link inequality at benchmark smoothness `p`:
/// `||(L^-1 T L^-1)^{ap} e_j|| / ||L^-p e_j||`. Returns `(min, max)`; the
/// link condition holds with constant `c` when the interval sits inside
/// `[1, c^p]`.
pub fn link_condition_ratios(
    problem: &SpectralProblem,
    scale: &HilbertScaleSpec,
    p: f64,
) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for (j, (s, w)) in problem.sigma.iter().zip(&scale.weights).enumerate() {
        let _ = j;
        let mu = s / (w * w);
        let ratio = mu.powf(scale.a * p) / w.powf(-p);
        lo = lo.min(ratio);
        hi = hi.max(ratio);
    }
    (lo, hi)
}

/// Benchmark-smoothness distance
/// `d_p(Rd) = min { ||L(L^-p u - ftrue)|| : ||u|| <= Rd }`, solved exactly on
/// the diagonal by a Lagrange-multiplier bisection on the norm constraint.
pub fn distance_function(
    problem: &SpectralProblem,
    scale: &HilbertScaleSpec,
    p: f64,
    rd: f64,
) -> f64 {
    assert!(p >= 1.0, "benchmark smoothness must be at least 1");
    assert!(rd > 0.0, "radius must be positive");
    // Minimize sum_j (a_j u_j - c_j)^2 subject to ||u|| <= Rd with
    // a_j = l_j^(1-p), c_j = l_j * ftrue_j.
    let a: Vec<f64> = scale.weights.iter().map(|l| l.powf(1.0 - p)).collect();
    let c: Vec<f64> = scale.weights.iter().zip(&problem.ftrue).map(|(l, f)| l * f).collect();

    let unconstrained_norm: f64 =
        a.iter().zip(&c).map(|(aj, cj)| (cj / aj) * (cj / aj)).sum::<f64>().sqrt();
    if unconstrained_norm <= rd {
        return 0.0;
    }

    let norm_at = |mu: f64| -> f64 {
        a.iter()
            .zip(&c)
            .map(|(aj, cj)| {
                let u = aj * cj / (aj * aj + mu);
                u * u
            })
            .sum::<f64>()
            .sqrt()
    };

    let mut lo = 0.0;
    let mut hi = 1.0;
    while norm_at(hi) > rd {
        hi *= 2.0;
        assert!(hi < 1e300, "bisection bound exploded");
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if norm_at(mid) > rd {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mu = 0.5 * (lo + hi);
    a.iter()
        .zip(&c)
        .map(|(aj, cj)| {
            let res = mu * cj / (aj * aj + mu);
            res * res
        })
        .sum::<f64>()
        .sqrt()
}
