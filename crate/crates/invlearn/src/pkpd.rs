//! Two-compartment pharmacokinetic application: covariate-to-parameter map
//! with allometric scaling and maturation, analytic concentration curves
//! with parameter sensitivities, synthetic patient data, and nonparametric
//! covariate-model estimation via kernelized nonlinear Tikhonov.

use crate::estimators::nonlinear::{
    nonlinear_tikhonov, ForwardModel, NlOptions, NlSolveReport, PenaltyMetric,
};
use crate::linalg::{dot, SymMatrix};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Reference body weight in kilograms for the allometric factors.
pub const REFERENCE_WEIGHT_KG: f64 = 70.0;

/// Intravenous bolus dose per kilogram of body weight.
pub const DOSE_PER_KG: f64 = 15.0;

/// Structural PK parameters of one patient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PkParams {
    /// Central volume (L).
    pub v1: f64,
    /// Peripheral volume (L).
    pub v2: f64,
    /// Intercompartmental flow (L/day).
    pub q: f64,
    /// Clearance (L/day).
    pub cl: f64,
}

impl PkParams {
    pub fn to_array(self) -> [f64; 4] {
        [self.v1, self.v2, self.q, self.cl]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self { v1: a[0], v2: a[1], q: a[2], cl: a[3] }
    }

    pub fn all_positive(&self) -> bool {
        self.v1 > 0.0 && self.v2 > 0.0 && self.q > 0.0 && self.cl > 0.0
    }
}

/// Weight-normalized parameters plus the maturation curve for clearance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovariateModel {
    pub v1_star: f64,
    pub v2_star: f64,
    pub q_star: f64,
    pub cl_star: f64,
    /// Hill maturation: `mat(a) = a^h / (a^h + a50^h)`.
    pub mat_half: f64,
    pub mat_hill: f64,
}

impl CovariateModel {
    /// Synthetic nominal truth used by the simulator.
    pub fn nominal() -> Self {
        Self {
            v1_star: 3.0,
            v2_star: 2.0,
            q_star: 1.0,
            cl_star: 0.2,
            mat_half: 0.5,
            mat_hill: 2.0,
        }
    }

    pub fn maturation(&self, age: f64) -> f64 {
        let ah = age.powf(self.mat_hill);
        ah / (ah + self.mat_half.powf(self.mat_hill))
    }
}

/// Covariates to structural parameters: volumes scale linearly with weight,
/// flows with the 3/4 allometric exponent, and clearance additionally by the
/// maturation factor.
pub fn covariate_to_params(model: &CovariateModel, age: f64, weight: f64) -> PkParams {
    assert!(age >= 0.0 && weight > 0.0);
    let wn = weight / REFERENCE_WEIGHT_KG;
    PkParams {
        v1: model.v1_star * wn,
        v2: model.v2_star * wn,
        q: model.q_star * wn.powf(0.75),
        cl: model.cl_star * model.maturation(age) * wn.powf(0.75),
    }
}

/// Concentrations of both compartments at the requested times.
#[derive(Debug, Clone)]
pub struct ConcentrationCurve {
    pub c1: Vec<f64>,
    pub c2: Vec<f64>,
}

/// Concentrations plus derivatives of `C1` with respect to
/// `(V1, V2, Q, CL)` at each time.
#[derive(Debug, Clone)]
pub struct ConcentrationSensitivity {
    pub c1: Vec<f64>,
    pub dc1: Vec<[f64; 4]>,
}

/// Two-compartment kinetics
/// `V1 C1' = Q (C2 - C1) - CL C1`, `V2 C2' = Q (C1 - C2)` with
/// `C1(0) = dose_per_kg * w / V1`, `C2(0) = 0`, solved analytically through
/// the eigendecomposition of the 2x2 rate matrix. The discriminant
/// `(b11 - b22)^2 + 4 Q^2/(V1 V2)` is strictly positive for positive
/// parameters, so the eigenvalues are always real and distinct; an RK4
/// fallback guards the degenerate branch anyway.
pub fn solve_two_compartment(
    params: &PkParams,
    dose_per_kg: f64,
    weight: f64,
    times: &[f64],
) -> ConcentrationCurve {
    assert!(params.all_positive(), "parameters must be positive");
    assert!(times.windows(2).all(|w| w[0] < w[1]), "times must be ascending");
    assert!(times.iter().all(|&t| t >= 0.0));

    let b11 = -(params.q + params.cl) / params.v1;
    let b12 = params.q / params.v1;
    let b21 = params.q / params.v2;
    let b22 = -params.q / params.v2;
    let c10 = dose_per_kg * weight / params.v1;

    let tr = b11 + b22;
    let disc = (b11 - b22) * (b11 - b22) + 4.0 * b12 * b21;
    if disc <= 0.0 {
        // Unreachable for positive parameters; integrate numerically.
        return rk4_two_compartment(params, c10, times, 1e-3);
    }
    let root = disc.sqrt();
    let l1 = 0.5 * (tr + root);
    let l2 = 0.5 * (tr - root);
    // Eigenvectors (b12, l - b11) for eigenvalue l; expand e^{Bt} c0 with
    // c0 = (c10, 0).
    // C(t) = a1 v(l1) e^{l1 t} + a2 v(l2) e^{l2 t}.
    let a1 = c10 * (l2 - b11) / (b12 * (l2 - l1));
    let a2 = c10 * (l1 - b11) / (b12 * (l1 - l2));
    let mut c1 = Vec::with_capacity(times.len());
    let mut c2 = Vec::with_capacity(times.len());
    for &t in times {
        let e1 = (l1 * t).exp();
        let e2 = (l2 * t).exp();
        c1.push(a1 * b12 * e1 + a2 * b12 * e2);
        c2.push(a1 * (l1 - b11) * e1 + a2 * (l2 - b11) * e2);
    }
    ConcentrationCurve { c1, c2 }
}

/// Classic fourth-order Runge-Kutta integration, also the test oracle for
/// the analytic solution.
pub fn rk4_two_compartment(
    params: &PkParams,
    c10: f64,
    times: &[f64],
    step: f64,
) -> ConcentrationCurve {
    let rhs = |c: [f64; 2]| -> [f64; 2] {
        [
            (params.q * (c[1] - c[0]) - params.cl * c[0]) / params.v1,
            params.q * (c[0] - c[1]) / params.v2,
        ]
    };
    let mut state = [c10, 0.0];
    let mut t = 0.0;
    let mut c1 = Vec::with_capacity(times.len());
    let mut c2 = Vec::with_capacity(times.len());
    for &target in times {
        while t < target {
            let h = step.min(target - t);
            let k1 = rhs(state);
            let k2 = rhs([state[0] + 0.5 * h * k1[0], state[1] + 0.5 * h * k1[1]]);
            let k3 = rhs([state[0] + 0.5 * h * k2[0], state[1] + 0.5 * h * k2[1]]);
            let k4 = rhs([state[0] + h * k3[0], state[1] + h * k3[1]]);
            state[0] += h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]);
            state[1] += h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]);
            t += h;
        }
        c1.push(state[0]);
        c2.push(state[1]);
    }
    ConcentrationCurve { c1, c2 }
}

/// Analytic solution with exact parameter sensitivities via the derivative
/// of the matrix exponential: in the eigenbasis of the rate matrix `B`,
/// `d exp(Bt)/dp = V (V^-1 B_p V  o  Phi(t)) V^-1` with
/// `Phi_ij = (e^{l_i t} - e^{l_j t})/(l_i - l_j)` and `Phi_ii = t e^{l_i t}`.
pub fn solve_two_compartment_with_sensitivities(
    params: &PkParams,
    dose_per_kg: f64,
    weight: f64,
    times: &[f64],
) -> ConcentrationSensitivity {
    assert!(params.all_positive());
    let v1 = params.v1;
    let v2 = params.v2;
    let q = params.q;
    let cl = params.cl;
    let b11 = -(q + cl) / v1;
    let b12 = q / v1;
    let b21 = q / v2;
    let b22 = -q / v2;
    let c10 = dose_per_kg * weight / v1;

    let tr = b11 + b22;
    let disc = ((b11 - b22) * (b11 - b22) + 4.0 * b12 * b21).sqrt();
    let l1 = 0.5 * (tr + disc);
    let l2 = 0.5 * (tr - disc);

    // Eigenvector matrix V (columns for l1, l2) and inverse.
    let v_mat = [[b12, b12], [l1 - b11, l2 - b11]];
    let det = v_mat[0][0] * v_mat[1][1] - v_mat[0][1] * v_mat[1][0];
    let v_inv = [
        [v_mat[1][1] / det, -v_mat[0][1] / det],
        [-v_mat[1][0] / det, v_mat[0][0] / det],
    ];

    // dB/dp and d c0/dp for p in (V1, V2, Q, CL).
    let db: [[[f64; 2]; 2]; 4] = [
        [[(q + cl) / (v1 * v1), -q / (v1 * v1)], [0.0, 0.0]],
        [[0.0, 0.0], [-q / (v2 * v2), q / (v2 * v2)]],
        [[-1.0 / v1, 1.0 / v1], [1.0 / v2, -1.0 / v2]],
        [[-1.0 / v1, 0.0], [0.0, 0.0]],
    ];
    let dc0: [f64; 4] = [-c10 / v1, 0.0, 0.0, 0.0];

    // Pre-rotate: w0 = V^-1 c0, and G_p = V^-1 (dB/dp) V.
    let w0 = [v_inv[0][0] * c10, v_inv[1][0] * c10];
    let mut g = [[[0.0f64; 2]; 2]; 4];
    for p in 0..4 {
        for i in 0..2 {
            for jj in 0..2 {
                let mut acc = 0.0;
                for k in 0..2 {
                    for l in 0..2 {
                        acc += v_inv[i][k] * db[p][k][l] * v_mat[l][jj];
                    }
                }
                g[p][i][jj] = acc;
            }
        }
    }

    let ls = [l1, l2];
    let mut c1 = Vec::with_capacity(times.len());
    let mut dc1 = Vec::with_capacity(times.len());
    for &t in times {
        let e = [(l1 * t).exp(), (l2 * t).exp()];
        // exp(Bt) c0 restricted to the first coordinate.
        let mut conc = 0.0;
        for i in 0..2 {
            conc += v_mat[0][i] * e[i] * w0[i];
        }
        c1.push(conc);

        let phi = |i: usize, j: usize| -> f64 {
            if i == j {
                t * e[i]
            } else {
                (e[i] - e[j]) / (ls[i] - ls[j])
            }
        };
        let mut row = [0.0f64; 4];
        for (p, slot) in row.iter_mut().enumerate() {
            // (d exp(Bt)/dp) c0 = V (G_p o Phi) w0, first coordinate.
            let mut acc = 0.0;
            for i in 0..2 {
                let mut inner = 0.0;
                for jj in 0..2 {
                    inner += g[p][i][jj] * phi(i, jj) * w0[jj];
                }
                acc += v_mat[0][i] * inner;
            }
            // exp(Bt) dc0/dp, first coordinate.
            if dc0[p] != 0.0 {
                for i in 0..2 {
                    acc += v_mat[0][i] * e[i] * v_inv[i][0] * dc0[p];
                }
            }
            *slot = acc;
        }
        dc1.push(row);
    }
    ConcentrationSensitivity { c1, dc1 }
}

/// One synthetic patient: covariates, observation times and log
/// concentrations.
#[derive(Debug, Clone, PartialEq)]
pub struct PkObservation {
    pub age: f64,
    pub weight: f64,
    pub times: Vec<f64>,
    pub log_conc: Vec<f64>,
}

/// Log-concentration curve `(ln C1(t_1), ..., ln C1(t_q))` for covariates
/// `(age, weight)` under a covariate model.
pub fn pkpd_forward(model: &CovariateModel, age: f64, weight: f64, times: &[f64]) -> Vec<f64> {
    let params = covariate_to_params(model, age, weight);
    let curve = solve_two_compartment(&params, DOSE_PER_KG, weight, times);
    curve.c1.iter().map(|c| c.ln()).collect()
}

/// Default observation schedule: `q` log-spaced times in `[0.1, 30]` days.
pub fn default_times(q: usize) -> Vec<f64> {
    assert!(q >= 2);
    let (lo, hi) = (0.1f64.ln(), 30f64.ln());
    (0..q)
        .map(|k| (lo + (hi - lo) * k as f64 / (q - 1) as f64).exp())
        .collect()
}

/// Simulator configuration; the JSON format of `pkpd-sim` and `pkpd-fit`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PkSimConfig {
    pub patients: usize,
    pub seed: u64,
    /// Standard deviation of the additive noise on log concentrations.
    pub noise_sigma: f64,
    #[serde(default = "default_q")]
    pub n_times: usize,
    #[serde(default = "CovariateModel::nominal")]
    pub truth: CovariateModel,
}

fn default_q() -> usize {
    6
}

/// Draws covariates (age uniform on `[0.1, 18]` years, weight lognormal
/// around an age-dependent median) and simulates noisy log concentrations.
pub fn simulate_patients(config: &PkSimConfig) -> Vec<PkObservation> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let times = default_times(config.n_times);
    (0..config.patients)
        .map(|_| {
            let age: f64 = rng.random_range(0.1..18.0);
            // Median weight grows from ~4 kg to ~70 kg over the age range.
            let median = 3.5 + 66.5 * (age / 18.0).powf(1.1);
            let z: f64 = rng.sample(StandardNormal);
            let weight = median * (0.15 * z).exp();
            let mut log_conc = pkpd_forward(&config.truth, age, weight, &times);
            for y in log_conc.iter_mut() {
                let eps: f64 = rng.sample(StandardNormal);
                *y += config.noise_sigma * eps;
            }
            PkObservation { age, weight, times: times.clone(), log_conc }
        })
        .collect()
}

/// CSV export: `age,weight,t_1..t_q,y_1..y_q`, one row per patient.
pub fn patients_to_csv(patients: &[PkObservation]) -> String {
    assert!(!patients.is_empty());
    let q = patients[0].times.len();
    let mut header = String::from("age,weight");
    for k in 1..=q {
        header.push_str(&format!(",t_{k}"));
    }
    for k in 1..=q {
        header.push_str(&format!(",y_{k}"));
    }
    header.push('\n');
    let mut out = header;
    for p in patients {
        out.push_str(&format!("{},{}", p.age, p.weight));
        for t in &p.times {
            out.push_str(&format!(",{t}"));
        }
        for y in &p.log_conc {
            out.push_str(&format!(",{y}"));
        }
        out.push('\n');
    }
    out
}

pub fn patients_from_csv(text: &str) -> Result<Vec<PkObservation>, String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty csv")?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 4 || (cols.len() - 2) % 2 != 0 {
        return Err(format!("unexpected column count {}", cols.len()));
    }
    let q = (cols.len() - 2) / 2;
    let mut patients = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|e| format!("line {}: {e}", ln + 2)))
            .collect::<Result<_, _>>()?;
        if vals.len() != 2 + 2 * q {
            return Err(format!("line {}: expected {} fields", ln + 2, 2 + 2 * q));
        }
        patients.push(PkObservation {
            age: vals[0],
            weight: vals[1],
            times: vals[2..2 + q].to_vec(),
            log_conc: vals[2 + q..].to_vec(),
        });
    }
    Ok(patients)
}

/// Nonparametric covariate model: four log-parameter surfaces
/// `log theta_c(x) = log fbar_c(x) + sum_i alpha_{c,i} k(x, x_i)` over a
/// Gaussian kernel on standardized log covariates. The log coordinates keep
/// the maturation transition at young ages slowly varying in the kernel
/// geometry, which a linear-age kernel cannot represent at tractable RKHS
/// norm.
pub struct CovariateFit {
    pub fbar: CovariateModel,
    pub kernel_bandwidth: f64,
    /// Standardization of (ln age, ln weight) used inside the kernel.
    pub mean: [f64; 2],
    pub std: [f64; 2],
    pub anchors: Vec<[f64; 2]>,
    /// Representer coefficients, one block of length `m` per parameter.
    pub alpha: Vec<f64>,
}

impl CovariateFit {
    fn standardized(&self, age: f64, weight: f64) -> [f64; 2] {
        [
            (age.ln() - self.mean[0]) / self.std[0],
            (weight.ln() - self.mean[1]) / self.std[1],
        ]
    }

    fn kernel_row(&self, age: f64, weight: f64) -> Vec<f64> {
        let z = self.standardized(age, weight);
        self.anchors
            .iter()
            .map(|a| {
                let d0 = z[0] - a[0];
                let d1 = z[1] - a[1];
                (-(d0 * d0 + d1 * d1) / (2.0 * self.kernel_bandwidth * self.kernel_bandwidth))
                    .exp()
            })
            .collect()
    }

    /// Estimated structural parameters at covariates `(age, weight)`.
    pub fn params_at(&self, age: f64, weight: f64) -> PkParams {
        let base = covariate_to_params(&self.fbar, age, weight).to_array();
        let row = self.kernel_row(age, weight);
        let m = self.anchors.len();
        let mut out = [0.0; 4];
        for c in 0..4 {
            let shift = dot(&row, &self.alpha[c * m..(c + 1) * m]);
            out[c] = base[c] * shift.exp();
        }
        PkParams::from_array(out)
    }
}

struct CovariateForwardModel<'a> {
    patients: &'a [PkObservation],
    fbar_params: Vec<[f64; 4]>,
    kernel: SymMatrix,
    weights: Vec<f64>,
    q: usize,
}

impl CovariateForwardModel<'_> {
    fn theta(&self, params: &[f64], i: usize) -> [f64; 4] {
        let m = self.patients.len();
        let mut out = [0.0; 4];
        for c in 0..4 {
            let mut shift = 0.0;
            for j in 0..m {
                shift += self.kernel.get(i, j) * params[c * m + j];
            }
            out[c] = self.fbar_params[i][c] * shift.exp();
        }
        out
    }
}

impl ForwardModel for CovariateForwardModel<'_> {
    fn sample_count(&self) -> usize {
        self.patients.len()
    }
    fn output_dim(&self) -> usize {
        self.q
    }
    fn param_dim(&self) -> usize {
        4 * self.patients.len()
    }
    fn eval_at(&self, params: &[f64], i: usize, out: &mut [f64]) {
        let theta = self.theta(params, i);
        let p = PkParams::from_array(theta);
        let curve =
            solve_two_compartment(&p, DOSE_PER_KG, self.weights[i], &self.patients[i].times);
        for (slot, c) in out.iter_mut().zip(&curve.c1) {
            *slot = c.ln();
        }
    }
    fn jacobian_at(&self, params: &[f64], i: usize, jac: &mut [f64]) {
        let m = self.patients.len();
        let dim = 4 * m;
        let theta = self.theta(params, i);
        let p = PkParams::from_array(theta);
        let sens = solve_two_compartment_with_sensitivities(
            &p,
            DOSE_PER_KG,
            self.weights[i],
            &self.patients[i].times,
        );
        // d ln C1 / d alpha_{c,j} = (dC1/dtheta_c) theta_c K_{ij} / C1.
        for k in 0..self.q {
            let c1 = sens.c1[k];
            for c in 0..4 {
                let factor = sens.dc1[k][c] * theta[c] / c1;
                for j in 0..m {
                    jac[k * dim + c * m + j] = factor * self.kernel.get(i, j);
                }
            }
        }
    }
}

/// Median pairwise distance of the standardized covariates.
fn median_heuristic(z: &[[f64; 2]]) -> f64 {
    let mut dists = Vec::new();
    for i in 0..z.len() {
        for j in (i + 1)..z.len() {
            let d0 = z[i][0] - z[j][0];
            let d1 = z[i][1] - z[j][1];
            dists.push((d0 * d0 + d1 * d1).sqrt());
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = dists.len() / 2;
    let med = if dists.len() % 2 == 0 { 0.5 * (dists[mid - 1] + dists[mid]) } else { dists[mid] };
    med.max(1e-6)
}

/// Fits the covariate model by nonlinear Tikhonov over the representer
/// coefficients, penalized by the RKHS norm per parameter surface.
/// Positivity of all structural parameters is automatic through the log
/// parameterization.
pub fn fit_covariate_model(
    patients: &[PkObservation],
    fbar: CovariateModel,
    lambda: f64,
    bandwidth: Option<f64>,
    opts: &NlOptions,
) -> (CovariateFit, NlSolveReport) {
    assert!(patients.len() >= 4, "need at least 4 patients");
    let m = patients.len();
    let q = patients[0].times.len();
    assert!(patients.iter().all(|p| p.times.len() == q && p.log_conc.len() == q));

    let mean_age = patients.iter().map(|p| p.age.ln()).sum::<f64>() / m as f64;
    let mean_w = patients.iter().map(|p| p.weight.ln()).sum::<f64>() / m as f64;
    let var_age = patients
        .iter()
        .map(|p| (p.age.ln() - mean_age) * (p.age.ln() - mean_age))
        .sum::<f64>()
        / m as f64;
    let var_w = patients
        .iter()
        .map(|p| (p.weight.ln() - mean_w) * (p.weight.ln() - mean_w))
        .sum::<f64>()
        / m as f64;
    let std = [var_age.sqrt().max(1e-9), var_w.sqrt().max(1e-9)];
    let mean = [mean_age, mean_w];
    let anchors: Vec<[f64; 2]> = patients
        .iter()
        .map(|p| [(p.age.ln() - mean[0]) / std[0], (p.weight.ln() - mean[1]) / std[1]])
        .collect();
    let h = bandwidth.unwrap_or_else(|| median_heuristic(&anchors));

    let kernel = SymMatrix::from_fn(m, |i, j| {
        let d0 = anchors[i][0] - anchors[j][0];
        let d1 = anchors[i][1] - anchors[j][1];
        (-(d0 * d0 + d1 * d1) / (2.0 * h * h)).exp()
    });

    let fbar_params: Vec<[f64; 4]> = patients
        .iter()
        .map(|p| covariate_to_params(&fbar, p.age, p.weight).to_array())
        .collect();
    let weights: Vec<f64> = patients.iter().map(|p| p.weight).collect();
    let y: Vec<f64> = patients.iter().flat_map(|p| p.log_conc.iter().copied()).collect();

    let model = CovariateForwardModel { patients, fbar_params, kernel: kernel.clone(), weights, q };
    let metric = PenaltyMetric::BlockGram { gram: kernel, blocks: 4 };
    let (alpha, report) =
        nonlinear_tikhonov(&model, &y, &metric, lambda, &vec![0.0; 4 * m], opts);

    (
        CovariateFit {
            fbar,
            kernel_bandwidth: h,
            mean,
            std,
            anchors,
            alpha,
        },
        report,
    )
}
