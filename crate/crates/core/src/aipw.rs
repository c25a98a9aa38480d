//! Augmented inverse-probability-weighted Cox estimation for a binary
//! covariate missing at random.
//!
//! Two logistic working models are used: a selection model for
//! `pi_i = P(x observed | observed data)` and a covariate model for
//! `p_i = P(x = 1 | observed data)`. Complete cases enter with weight
//! `a_i = 1/pi_i`; every subject additionally carries the augmentation
//! `(1 - a_i) E[.]`, where the conditional expectation over the binary `x` is
//! exact: `E[g(x)] = g(1) p_i + g(0) (1 - p_i)`. Because the counting process
//! of a subject is observed, the augmentation integral collapses onto the
//! subject's own event time, which gives the estimating function
//!
//! ```text
//! U(beta) = sum_i event_i [ (a_i x_i + (1 - a_i) p_i, z_i) - S1(beta, t_i) / S0(beta, t_i) ]
//! S_m(beta, t) = sum_{j : t_j >= t} [ a_j r_j^(m) + (1 - a_j) E r_j^(m) ]
//! ```
//!
//! with `a_i = 0` for subjects whose `x` is missing. The root is found by
//! Newton iteration with a central-difference Jacobian.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{PreparedData, WorkingSpec};
use crate::glm::{fit_glm, linear_predictor, GlmError, GlmFit, Link};
use crate::rng;
use crate::survival::{CoxError, SurvivalRecord, DIVERGENCE_BOUND};

/// Lower bound applied to fitted selection probabilities.
pub const PI_FLOOR: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AipwError {
    #[error("AIPW requires a binary (0/1) covariate; row {row} has {value}")]
    NonBinaryCovariate { row: usize, value: f64 },
    #[error("selection model: {0}")]
    SelectionModel(GlmError),
    #[error("covariate model: {0}")]
    CovariateModel(GlmError),
    #[error(transparent)]
    Cox(#[from] CoxError),
    #[error("AIPW solver diverged")]
    Diverged,
    #[error("estimating-equation Jacobian is singular")]
    SingularInformation,
    #[error("{failures} of {resamples} bootstrap resamples failed")]
    TooManyFailures { failures: usize, resamples: usize },
    #[error("bootstrap needs at least 2 resamples, got {0}")]
    TooFewResamples(usize),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

#[derive(Debug, Clone)]
pub struct AipwWorkingModels {
    /// `None` when every `x` is observed; then `pi = 1` for all subjects.
    pub selection_model: Option<GlmFit>,
    /// `None` when every `x` is observed; the augmentation then vanishes.
    pub covariate_model: Option<GlmFit>,
    pub spec_selection: WorkingSpec,
    pub spec_covariate: WorkingSpec,
    /// Floored selection probability per subject.
    pub pi: Vec<f64>,
    /// `P(x = 1 | observed data)` per subject.
    pub p: Vec<f64>,
}

fn check_binary(dataset: &[SurvivalRecord]) -> Result<(), AipwError> {
    for (row, r) in dataset.iter().enumerate() {
        if let Some(x) = r.x {
            if x != 0.0 && x != 1.0 {
                return Err(AipwError::NonBinaryCovariate { row, value: x });
            }
        }
    }
    Ok(())
}

fn logistic(eta: f64) -> f64 {
    1.0 / (1.0 + (-eta).exp())
}

/// Fit the selection model on all subjects (response: x observed) and the
/// covariate model on complete cases (response: x), both with a logit link.
pub fn fit_working_models(
    dataset: &[SurvivalRecord],
    spec_selection: &WorkingSpec,
    spec_covariate: &WorkingSpec,
) -> Result<AipwWorkingModels, AipwError> {
    check_binary(dataset)?;
    let n = dataset.len();
    if dataset.iter().all(SurvivalRecord::is_observed) {
        return Ok(AipwWorkingModels {
            selection_model: None,
            covariate_model: None,
            spec_selection: spec_selection.clone(),
            spec_covariate: spec_covariate.clone(),
            pi: vec![1.0; n],
            p: vec![0.0; n],
        });
    }
    let prep = PreparedData::new(dataset)?;
    let all: Vec<usize> = (0..n).collect();
    let observed: Vec<f64> = dataset.iter().map(|r| if r.is_observed() { 1.0 } else { 0.0 }).collect();
    let selection = fit_glm(&prep.design(spec_selection, &all), &observed, Link::Logit).map_err(AipwError::SelectionModel)?;

    let complete: Vec<usize> = (0..n).filter(|&i| dataset[i].is_observed()).collect();
    let xs: Vec<f64> = complete.iter().map(|&i| dataset[i].x.unwrap_or_default()).collect();
    let covariate = fit_glm(&prep.design(spec_covariate, &complete), &xs, Link::Logit).map_err(AipwError::CovariateModel)?;

    let mut pi = Vec::with_capacity(n);
    let mut p = Vec::with_capacity(n);
    let mut buf = Vec::new();
    for (i, rec) in dataset.iter().enumerate() {
        buf.clear();
        spec_selection.push_row(rec, prep.cumhaz[i], &mut buf);
        let eta = linear_predictor(&selection, &buf).map_err(AipwError::SelectionModel)?;
        pi.push(logistic(eta).max(PI_FLOOR));
        buf.clear();
        spec_covariate.push_row(rec, prep.cumhaz[i], &mut buf);
        let eta = linear_predictor(&covariate, &buf).map_err(AipwError::CovariateModel)?;
        p.push(logistic(eta));
    }
    Ok(AipwWorkingModels {
        selection_model: Some(selection),
        covariate_model: Some(covariate),
        spec_selection: spec_selection.clone(),
        spec_covariate: spec_covariate.clone(),
        pi,
        p,
    })
}

/// The AIPW estimating function laid out for sorted risk-set sweeps.
#[derive(Debug, Clone)]
pub struct AipwEquation {
    n_z: usize,
    time: Vec<f64>,
    event: Vec<bool>,
    /// IPW weight `1/pi` for complete cases, 0 for missing `x`.
    weight: Vec<f64>,
    x: Vec<f64>,
    p: Vec<f64>,
    z: Vec<f64>,
}

impl AipwEquation {
    pub fn new(dataset: &[SurvivalRecord], models: &AipwWorkingModels) -> Result<Self, AipwError> {
        let n = dataset.len();
        if models.pi.len() != n || models.p.len() != n {
            return Err(AipwError::DimensionMismatch { expected: n, found: models.pi.len() });
        }
        if !dataset.iter().any(|r| r.event) {
            return Err(CoxError::NoEvents.into());
        }
        let n_z = dataset.first().map_or(0, |r| r.z.len());
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| dataset[a].time.total_cmp(&dataset[b].time).then(a.cmp(&b)));
        let mut z = Vec::with_capacity(n * n_z);
        for &i in &order {
            if dataset[i].z.len() != n_z {
                return Err(AipwError::DimensionMismatch { expected: n_z, found: dataset[i].z.len() });
            }
            z.extend_from_slice(&dataset[i].z);
        }
        Ok(Self {
            n_z,
            time: order.iter().map(|&i| dataset[i].time).collect(),
            event: order.iter().map(|&i| dataset[i].event).collect(),
            weight: order.iter().map(|&i| if dataset[i].is_observed() { 1.0 / models.pi[i] } else { 0.0 }).collect(),
            x: order.iter().map(|&i| dataset[i].x.unwrap_or(0.0)).collect(),
            p: order.iter().map(|&i| models.p[i]).collect(),
            z,
        })
    }

    pub fn dim(&self) -> usize {
        1 + self.n_z
    }

    /// `U(beta)`; `None` when a weighted risk-set sum is exactly zero or the
    /// result is not finite. Negative sums are allowed: with weights `1/pi > 1`
    /// the augmented sum can change sign in small late risk sets.
    pub fn eval(&self, beta: &[f64]) -> Option<Vec<f64>> {
        let n = self.time.len();
        let nz = self.n_z;
        let bx = beta[0];
        let bz = &beta[1..];
        let eta0: Vec<f64> = (0..n).map(|k| self.z[k * nz..(k + 1) * nz].iter().zip(bz).map(|(a, b)| a * b).sum()).collect();
        let shift = eta0.iter().copied().fold(f64::NEG_INFINITY, f64::max) + bx.max(0.0);
        let ex = bx.exp();
        let mut s0 = 0.0;
        let mut s1x = 0.0;
        let mut s1z = vec![0.0; nz];
        let mut u = vec![0.0; 1 + nz];
        let mut end = n;
        while end > 0 {
            let t = self.time[end - 1];
            let mut start = end - 1;
            while start > 0 && self.time[start - 1] == t {
                start -= 1;
            }
            #[allow(clippy::needless_range_loop)]
            for k in start..end {
                let e0 = (eta0[k] - shift).exp();
                let e1 = e0 * ex;
                let a = self.weight[k];
                let r = if self.x[k] != 0.0 { e1 } else { e0 };
                let c0 = a * r + (1.0 - a) * (self.p[k] * e1 + (1.0 - self.p[k]) * e0);
                let c1 = a * self.x[k] * r + (1.0 - a) * self.p[k] * e1;
                s0 += c0;
                s1x += c1;
                for (acc, zv) in s1z.iter_mut().zip(&self.z[k * nz..(k + 1) * nz]) {
                    *acc += zv * c0;
                }
            }
            if (start..end).any(|k| self.event[k]) {
                if s0 == 0.0 {
                    return None;
                }
                for k in start..end {
                    if self.event[k] {
                        let a = self.weight[k];
                        u[0] += a * self.x[k] + (1.0 - a) * self.p[k] - s1x / s0;
                        for (j, acc) in u[1..].iter_mut().enumerate() {
                            *acc += self.z[k * nz + j] - s1z[j] / s0;
                        }
                    }
                }
            }
            end = start;
        }
        u.iter().all(|v| v.is_finite()).then_some(u)
    }

    fn jacobian(&self, beta: &[f64]) -> Option<DMatrix<f64>> {
        let d = beta.len();
        let mut jac = DMatrix::zeros(d, d);
        let mut b = beta.to_vec();
        for k in 0..d {
            let h = 1e-6 * beta[k].abs().max(1.0);
            b[k] = beta[k] + h;
            let up = self.eval(&b)?;
            b[k] = beta[k] - h;
            let down = self.eval(&b)?;
            b[k] = beta[k];
            for r in 0..d {
                jac[(r, k)] = (up[r] - down[r]) / (2.0 * h);
            }
        }
        Some(jac)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AipwOptions {
    pub init: Option<Vec<f64>>,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for AipwOptions {
    fn default() -> Self {
        Self { init: None, max_iter: 100, tol: 1e-8 }
    }
}

/// Root of the AIPW estimating equation.
#[derive(Debug, Clone, PartialEq)]
pub struct AipwSolution {
    pub beta: Vec<f64>,
    pub diverged: bool,
    pub iterations: usize,
    /// `max_k |U_k(beta)|` at the returned coefficients.
    pub residual: f64,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

pub fn aipw_solve(
    dataset: &[SurvivalRecord],
    models: &AipwWorkingModels,
    opts: &AipwOptions,
) -> Result<AipwSolution, AipwError> {
    let eq = AipwEquation::new(dataset, models)?;
    solve_equation(&eq, opts)
}

pub fn solve_equation(eq: &AipwEquation, opts: &AipwOptions) -> Result<AipwSolution, AipwError> {
    let d = eq.dim();
    let mut beta = match &opts.init {
        Some(b) if b.len() == d => b.clone(),
        Some(b) => return Err(AipwError::DimensionMismatch { expected: d, found: b.len() }),
        None => vec![0.0; d],
    };
    let diverged = |beta: Vec<f64>, iterations, residual| Ok(AipwSolution { beta, diverged: true, iterations, residual });
    let Some(mut u) = eq.eval(&beta) else {
        return diverged(beta, 0, f64::NAN);
    };
    let mut norm = inf_norm(&u);
    for iter in 0..opts.max_iter {
        if norm < opts.tol {
            return Ok(AipwSolution { beta, diverged: false, iterations: iter, residual: norm });
        }
        let Some(jac) = eq.jacobian(&beta) else {
            return diverged(beta, iter, norm);
        };
        let step = jac.lu().solve(&DVector::from_column_slice(&u)).ok_or(AipwError::SingularInformation)?;
        let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        let current = sq(&u);
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b - scale * s).collect();
            if let Some(cu) = eq.eval(&cand) {
                if sq(&cu) < current {
                    accepted = Some((cand, cu));
                    break;
                }
            }
            scale *= 0.5;
        }
        match accepted {
            Some((b, cu)) => {
                beta = b;
                u = cu;
                norm = inf_norm(&u);
            }
            // No decrease possible: either at the rounding floor of a root or stuck.
            None if norm < 1e-6 => {
                return Ok(AipwSolution { beta, diverged: false, iterations: iter, residual: norm });
            }
            None => return diverged(beta, iter + 1, norm),
        }
        if inf_norm(&beta) > DIVERGENCE_BOUND {
            return diverged(beta, iter + 1, norm);
        }
    }
    if norm < opts.tol {
        return Ok(AipwSolution { beta, diverged: false, iterations: opts.max_iter, residual: norm });
    }
    diverged(beta, opts.max_iter, norm)
}

/// Point estimate with bootstrap standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AipwResult {
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    pub diverged: bool,
    pub n_boot_failures: usize,
    pub n_boot: usize,
}

/// Fit both working models and solve; any failure counts as divergence.
fn fit_and_solve(
    dataset: &[SurvivalRecord],
    spec_selection: &WorkingSpec,
    spec_covariate: &WorkingSpec,
    opts: &AipwOptions,
) -> Option<Vec<f64>> {
    let models = fit_working_models(dataset, spec_selection, spec_covariate).ok()?;
    let sol = aipw_solve(dataset, &models, opts).ok()?;
    (!sol.diverged).then_some(sol.beta)
}

/// AIPW point estimate plus the standard deviation of `b` bootstrap refits
/// (working models are refitted on every resample). Resample `k` draws from
/// the stream `(seed, k)`.
pub fn aipw_bootstrap_se(
    dataset: &[SurvivalRecord],
    spec_selection: &WorkingSpec,
    spec_covariate: &WorkingSpec,
    b: usize,
    seed: u64,
    opts: &AipwOptions,
) -> Result<AipwResult, AipwError> {
    if b < 2 {
        return Err(AipwError::TooFewResamples(b));
    }
    let models = fit_working_models(dataset, spec_selection, spec_covariate)?;
    let point = aipw_solve(dataset, &models, opts)?;
    let n = dataset.len();
    let boot_opts = opts.clone();
    let draws: Vec<Option<Vec<f64>>> = (0..b)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng::stream(seed, &[k as u64]);
            let sample: Vec<SurvivalRecord> = (0..n).map(|_| dataset[rng.random_range(0..n)].clone()).collect();
            fit_and_solve(&sample, spec_selection, spec_covariate, &boot_opts)
        })
        .collect();
    let ok: Vec<&Vec<f64>> = draws.iter().flatten().collect();
    let failures = b - ok.len();
    if failures * 2 > b {
        return Err(AipwError::TooManyFailures { failures, resamples: b });
    }
    let d = point.beta.len();
    let se = (0..d)
        .map(|k| {
            let m = ok.len() as f64;
            let mean = ok.iter().map(|v| v[k]).sum::<f64>() / m;
            (ok.iter().map(|v| (v[k] - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
        })
        .collect();
    Ok(AipwResult { beta: point.beta, se, diverged: point.diverged, n_boot_failures: failures, n_boot: b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::survival::{fit_cox, CoxOptions};

    fn full_data() -> Vec<SurvivalRecord> {
        let rows = [
            (0.5, true, 0.2, 1.0), (0.8, true, 0.9, 0.0), (1.1, false, 0.4, 1.0), (1.3, true, 0.1, 0.0),
            (1.7, true, 0.7, 1.0), (2.0, false, 0.3, 0.0), (2.4, true, 0.8, 1.0), (2.9, true, 0.5, 0.0),
            (3.3, false, 0.6, 1.0), (3.8, true, 0.2, 0.0), (4.1, true, 0.95, 1.0), (5.0, true, 0.05, 0.0),
        ];
        rows.iter().map(|&(t, e, z, x)| SurvivalRecord::new(t, e, vec![z], Some(x)).unwrap()).collect()
    }

    #[test]
    fn no_missingness_reduces_to_cox() {
        let d = full_data();
        let models = fit_working_models(&d, &WorkingSpec::selection_full(), &WorkingSpec::covariate_full()).unwrap();
        assert!(models.selection_model.is_none());
        assert!(models.pi.iter().all(|&p| p == 1.0));
        let sol = aipw_solve(&d, &models, &AipwOptions::default()).unwrap();
        let fo = fit_cox(&d, None, None, &CoxOptions::default()).unwrap();
        assert!(!sol.diverged);
        for (a, b) in sol.beta.iter().zip(&fo.beta) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn equation_matches_cox_score_without_missingness() {
        let d = full_data();
        let models = fit_working_models(&d, &WorkingSpec::selection_full(), &WorkingSpec::covariate_full()).unwrap();
        let eq = AipwEquation::new(&d, &models).unwrap();
        let (g, _) = crate::survival::score_and_info(&[0.3, -0.8], &d, None).unwrap();
        let u = eq.eval(&[0.3, -0.8]).unwrap();
        assert!((u[0] - g[0]).abs() < 1e-12 && (u[1] - g[1]).abs() < 1e-12);
    }

    #[test]
    fn non_binary_covariate_rejected() {
        let mut d = full_data();
        d[0].x = Some(0.5);
        assert!(matches!(
            fit_working_models(&d, &WorkingSpec::selection_full(), &WorkingSpec::covariate_full()),
            Err(AipwError::NonBinaryCovariate { row: 0, .. })
        ));
    }

    #[test]
    fn two_resample_se_is_two_point_sd() {
        let d = full_data();
        let spec_s = WorkingSpec::selection_full();
        let spec_c = WorkingSpec::covariate_full();
        let res = aipw_bootstrap_se(&d, &spec_s, &spec_c, 2, 5, &AipwOptions::default());
        let res = match res {
            Ok(r) => r,
            Err(e) => panic!("{e}"),
        };
        // Recompute the two resamples by hand.
        let boot_opts = AipwOptions::default();
        let betas: Vec<Vec<f64>> = (0..2)
            .map(|k| {
                let mut rng = rng::stream(5, &[k]);
                let s: Vec<_> = (0..d.len()).map(|_| d[rng.random_range(0..d.len())].clone()).collect();
                fit_and_solve(&s, &spec_s, &spec_c, &boot_opts).expect("resample fit")
            })
            .collect();
        for (k, se) in res.se.iter().enumerate() {
            let expected = (betas[0][k] - betas[1][k]).abs() / 2f64.sqrt();
            assert!((se - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn all_resamples_diverging_is_too_many_failures() {
        // x = 1 subjects are all censored: monotone likelihood on every resample.
        let d: Vec<_> = (0..20)
            .map(|i| {
                let x = (i % 2) as f64;
                SurvivalRecord::new(1.0 + i as f64, x == 0.0, vec![(i % 5) as f64 / 5.0], Some(x)).unwrap()
            })
            .collect();
        let err = aipw_bootstrap_se(&d, &WorkingSpec::selection_full(), &WorkingSpec::covariate_full(), 10, 1, &AipwOptions::default()).unwrap_err();
        assert!(matches!(err, AipwError::TooManyFailures { .. }), "{err:?}");
    }

    #[test]
    fn single_resample_rejected() {
        let d = full_data();
        assert_eq!(
            aipw_bootstrap_se(&d, &WorkingSpec::selection_full(), &WorkingSpec::covariate_full(), 1, 0, &AipwOptions::default()),
            Err(AipwError::TooFewResamples(1))
        );
    }
}
