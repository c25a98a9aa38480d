//! Cox proportional-hazards numerics.
//!
//! Partial likelihood with Breslow handling of tied event times, its analytic
//! score and observed information, a Newton-Raphson fitter with step halving,
//! and the Breslow / Nelson-Aalen cumulative hazard estimators.
//!
//! All risk-set aggregates are accumulated in a single sweep over subjects
//! sorted by decreasing time, so one evaluation costs `O(n p^2)` after an
//! `O(n log n)` sort.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Coefficient bound beyond which a fit is declared divergent.
pub const DIVERGENCE_BOUND: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoxError {
    #[error("no observed events in the data")]
    NoEvents,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("row {row} has a missing covariate")]
    MissingCovariate { row: usize },
    #[error("invalid record at row {row}: {reason}")]
    InvalidRecord { row: usize, reason: String },
    #[error("Newton iterations diverged after {iterations} steps (max |beta| = {max_abs_beta:.3})")]
    Diverged { iterations: usize, max_abs_beta: f64 },
    #[error("information matrix is numerically singular")]
    SingularInformation,
}

/// One subject. `x` is the covariate subject to missingness; `z` holds the
/// fully observed covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub time: f64,
    pub event: bool,
    pub z: Vec<f64>,
    pub x: Option<f64>,
}

impl SurvivalRecord {
    pub fn new(time: f64, event: bool, z: Vec<f64>, x: Option<f64>) -> Result<Self, CoxError> {
        if !(time.is_finite() && time >= 0.0) {
            return Err(CoxError::InvalidRecord { row: 0, reason: format!("time {time} must be finite and >= 0") });
        }
        if z.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(CoxError::InvalidRecord { row: 0, reason: "non-finite covariate".into() });
        }
        Ok(Self { time, event, z, x })
    }

    /// Missingness indicator: true when `x` is observed.
    pub fn is_observed(&self) -> bool {
        self.x.is_some()
    }

    /// Full covariate vector `(x, z...)`, or `None` when `x` is missing.
    pub fn covariates(&self) -> Option<Vec<f64>> {
        self.x.map(|x| std::iter::once(x).chain(self.z.iter().copied()).collect())
    }

    pub fn with_x(&self, x: f64) -> Self {
        Self { x: Some(x), ..self.clone() }
    }
}

/// Right-continuous step function, zero before the first knot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFunction {
    knots: Vec<f64>,
    values: Vec<f64>,
}

impl StepFunction {
    pub fn new(knots: Vec<f64>, values: Vec<f64>) -> Result<Self, CoxError> {
        if knots.len() != values.len() {
            return Err(CoxError::DimensionMismatch { expected: knots.len(), found: values.len() });
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if knots.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(CoxError::InvalidRecord { row: 0, reason: "step function knots must be strictly increasing".into() });
        }
        Ok(Self { knots, values })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn eval(&self, t: f64) -> f64 {
        let idx = self.knots.partition_point(|&k| k <= t);
        if idx == 0 {
            0.0
        } else {
            self.values[idx - 1]
        }
    }

    /// Jump sizes at each knot.
    pub fn jumps(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.values
            .iter()
            .map(|&v| {
                let j = v - prev;
                prev = v;
                j
            })
            .collect()
    }
}

/// Fitted Cox model.
#[derive(Debug, Clone)]
pub struct CoxFit {
    pub beta: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub loglik: f64,
    pub converged: bool,
    pub n_iter: usize,
    pub baseline_cumhaz: StepFunction,
}

impl CoxFit {
    pub fn se(&self) -> Vec<f64> {
        (0..self.beta.len()).map(|k| self.covariance[(k, k)].max(0.0).sqrt()).collect()
    }

    pub fn variances(&self) -> Vec<f64> {
        (0..self.beta.len()).map(|k| self.covariance[(k, k)]).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CoxOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for CoxOptions {
    fn default() -> Self {
        Self { max_iter: 100, tol: 1e-8 }
    }
}

/// Complete-covariate survival data laid out for risk-set sweeps.
///
/// Rows are stored sorted by increasing time; `order[k]` is the caller's row
/// index of sorted position `k`.
#[derive(Debug, Clone)]
pub struct CoxDesign {
    n: usize,
    p: usize,
    time: Vec<f64>,
    event: Vec<bool>,
    cov: Vec<f64>,
    weight: Vec<f64>,
    order: Vec<usize>,
}

impl CoxDesign {
    pub fn new(
        times: &[f64],
        events: &[bool],
        rows: &[Vec<f64>],
        weights: Option<&[f64]>,
    ) -> Result<Self, CoxError> {
        let n = times.len();
        if events.len() != n {
            return Err(CoxError::DimensionMismatch { expected: n, found: events.len() });
        }
        if rows.len() != n {
            return Err(CoxError::DimensionMismatch { expected: n, found: rows.len() });
        }
        if let Some(w) = weights {
            if w.len() != n {
                return Err(CoxError::DimensionMismatch { expected: n, found: w.len() });
            }
            if let Some(row) = w.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(CoxError::InvalidRecord { row, reason: "weights must be finite and nonnegative".into() });
            }
        }
        let p = rows.first().map_or(0, Vec::len);
        for (row, r) in rows.iter().enumerate() {
            if r.len() != p {
                return Err(CoxError::DimensionMismatch { expected: p, found: r.len() });
            }
            if !(times[row].is_finite() && times[row] >= 0.0) {
                return Err(CoxError::InvalidRecord { row, reason: "time must be finite and >= 0".into() });
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| times[a].total_cmp(&times[b]).then(a.cmp(&b)));
        let mut cov = Vec::with_capacity(n * p);
        for &i in &order {
            cov.extend_from_slice(&rows[i]);
        }
        let design = Self {
            n,
            p,
            time: order.iter().map(|&i| times[i]).collect(),
            event: order.iter().map(|&i| events[i]).collect(),
            cov,
            weight: order.iter().map(|&i| weights.map_or(1.0, |w| w[i])).collect(),
            order,
        };
        if !design.has_events() {
            return Err(CoxError::NoEvents);
        }
        Ok(design)
    }

    /// Design with covariates `(x, z...)`; every record must have `x` observed.
    pub fn from_records(data: &[SurvivalRecord], weights: Option<&[f64]>) -> Result<Self, CoxError> {
        let rows = data
            .iter()
            .enumerate()
            .map(|(row, r)| r.covariates().ok_or(CoxError::MissingCovariate { row }))
            .collect::<Result<Vec<_>, _>>()?;
        let times: Vec<f64> = data.iter().map(|r| r.time).collect();
        let events: Vec<bool> = data.iter().map(|r| r.event).collect();
        Self::new(&times, &events, &rows, weights)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_covariates(&self) -> usize {
        self.p
    }

    /// Caller row index for each sorted position.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    fn has_events(&self) -> bool {
        self.event.iter().zip(&self.weight).any(|(&e, &w)| e && w > 0.0)
    }

    fn row(&self, k: usize) -> &[f64] {
        &self.cov[k * self.p..(k + 1) * self.p]
    }

    fn linear_predictors(&self, beta: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|k| self.row(k).iter().zip(beta).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Visit each distinct time from latest to earliest, after adding all
    /// subjects with that time to the risk set. `f` receives the range of
    /// sorted positions sharing the time.
    fn sweep_tied_groups(&self, mut f: impl FnMut(std::ops::Range<usize>, bool)) {
        let mut end = self.n;
        while end > 0 {
            let t = self.time[end - 1];
            let mut start = end - 1;
            while start > 0 && self.time[start - 1] == t {
                start -= 1;
            }
            let any_event = (start..end).any(|k| self.event[k] && self.weight[k] > 0.0);
            f(start..end, any_event);
            end = start;
        }
    }

    pub fn partial_loglik(&self, beta: &[f64]) -> Result<f64, CoxError> {
        self.check_beta(beta)?;
        let eta = self.linear_predictors(beta);
        let shift = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s0 = 0.0;
        let mut ll = 0.0;
        self.sweep_tied_groups(|range, any_event| {
            for k in range.clone() {
                s0 += self.weight[k] * (eta[k] - shift).exp();
            }
            if any_event {
                let log_s0 = s0.ln() + shift;
                for k in range {
                    if self.event[k] {
                        ll += self.weight[k] * (eta[k] - log_s0);
                    }
                }
            }
        });
        Ok(ll)
    }

    /// Log partial likelihood, score vector and observed information.
    pub fn score_and_info(&self, beta: &[f64]) -> Result<(f64, DVector<f64>, DMatrix<f64>), CoxError> {
        self.check_beta(beta)?;
        let p = self.p;
        let eta = self.linear_predictors(beta);
        let shift = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s0 = 0.0;
        let mut s1 = vec![0.0; p];
        let mut s2 = vec![0.0; p * p];
        let mut ll = 0.0;
        let mut grad = DVector::zeros(p);
        let mut info = DMatrix::zeros(p, p);
        self.sweep_tied_groups(|range, any_event| {
            for k in range.clone() {
                let r = self.weight[k] * (eta[k] - shift).exp();
                let x = self.row(k);
                s0 += r;
                for a in 0..p {
                    s1[a] += r * x[a];
                    for b in 0..=a {
                        s2[a * p + b] += r * x[a] * x[b];
                    }
                }
            }
            if !any_event {
                return;
            }
            let d: f64 = range.clone().filter(|&k| self.event[k]).map(|k| self.weight[k]).sum();
            let log_s0 = s0.ln() + shift;
            for k in range {
                if self.event[k] {
                    let w = self.weight[k];
                    ll += w * (eta[k] - log_s0);
                    let x = self.row(k);
                    for a in 0..p {
                        grad[a] += w * x[a];
                    }
                }
            }
            for a in 0..p {
                let mean_a = s1[a] / s0;
                grad[a] -= d * mean_a;
                for b in 0..=a {
                    let v = d * (s2[a * p + b] / s0 - mean_a * s1[b] / s0);
                    info[(a, b)] += v;
                }
            }
        });
        for a in 0..p {
            for b in 0..a {
                info[(b, a)] = info[(a, b)];
            }
        }
        Ok((ll, grad, info))
    }

    /// Breslow estimate of the baseline cumulative hazard at `beta`.
    pub fn breslow(&self, beta: &[f64]) -> Result<StepFunction, CoxError> {
        self.check_beta(beta)?;
        let eta = self.linear_predictors(beta);
        let mut s0 = 0.0;
        let mut jumps: Vec<(f64, f64)> = Vec::new();
        self.sweep_tied_groups(|range, any_event| {
            for k in range.clone() {
                s0 += self.weight[k] * eta[k].exp();
            }
            if any_event {
                let d: f64 = range.clone().filter(|&k| self.event[k]).map(|k| self.weight[k]).sum();
                jumps.push((self.time[range.start], d / s0));
            }
        });
        jumps.reverse();
        let mut acc = 0.0;
        let (knots, values) = jumps
            .into_iter()
            .map(|(t, j)| {
                acc += j;
                (t, acc)
            })
            .unzip();
        StepFunction::new(knots, values)
    }

    pub fn fit(&self, init: Option<&[f64]>, opts: &CoxOptions) -> Result<CoxFit, CoxError> {
        let p = self.p;
        let mut beta = match init {
            Some(b) => {
                self.check_beta(b)?;
                b.to_vec()
            }
            None => vec![0.0; p],
        };
        let (mut ll, mut grad, mut info) = self.score_and_info(&beta)?;
        let mut iter = 0;
        loop {
            if grad.amax() < opts.tol {
                let covariance = info
                    .clone()
                    .cholesky()
                    .ok_or(CoxError::SingularInformation)?
                    .inverse();
                return Ok(CoxFit {
                    baseline_cumhaz: self.breslow(&beta)?,
                    beta,
                    covariance,
                    loglik: ll,
                    converged: true,
                    n_iter: iter,
                });
            }
            if iter >= opts.max_iter {
                return Err(CoxError::Diverged { iterations: iter, max_abs_beta: max_abs(&beta) });
            }
            iter += 1;
            let step = info
                .clone()
                .cholesky()
                .ok_or(CoxError::SingularInformation)?
                .solve(&grad);
            let mut scale = 1.0;
            let mut candidate;
            let mut halvings = 0;
            loop {
                candidate = beta.iter().zip(step.iter()).map(|(b, s)| b + scale * s).collect::<Vec<_>>();
                if max_abs(&candidate) > DIVERGENCE_BOUND {
                    return Err(CoxError::Diverged { iterations: iter, max_abs_beta: max_abs(&candidate) });
                }
                let cand_ll = self.partial_loglik(&candidate)?;
                if cand_ll.is_finite() && (cand_ll >= ll - 1e-12 * ll.abs().max(1.0) || halvings >= 30) {
                    break;
                }
                scale *= 0.5;
                halvings += 1;
            }
            beta = candidate;
            (ll, grad, info) = self.score_and_info(&beta)?;
            if !ll.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(CoxError::Diverged { iterations: iter, max_abs_beta: max_abs(&beta) });
            }
        }
    }

    fn check_beta(&self, beta: &[f64]) -> Result<(), CoxError> {
        if beta.len() != self.p {
            return Err(CoxError::DimensionMismatch { expected: self.p, found: beta.len() });
        }
        Ok(())
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

pub fn partial_loglik(beta: &[f64], data: &[SurvivalRecord], weights: Option<&[f64]>) -> Result<f64, CoxError> {
    CoxDesign::from_records(data, weights)?.partial_loglik(beta)
}

/// Score (gradient of the log partial likelihood) and observed information.
pub fn score_and_info(
    beta: &[f64],
    data: &[SurvivalRecord],
    weights: Option<&[f64]>,
) -> Result<(DVector<f64>, DMatrix<f64>), CoxError> {
    let (_, g, i) = CoxDesign::from_records(data, weights)?.score_and_info(beta)?;
    Ok((g, i))
}

/// Newton-Raphson fit of the Cox model on complete records with covariates `(x, z...)`.
pub fn fit_cox(
    data: &[SurvivalRecord],
    weights: Option<&[f64]>,
    init: Option<&[f64]>,
    opts: &CoxOptions,
) -> Result<CoxFit, CoxError> {
    CoxDesign::from_records(data, weights)?.fit(init, opts)
}

pub fn breslow_cumhaz(beta: &[f64], data: &[SurvivalRecord]) -> Result<StepFunction, CoxError> {
    CoxDesign::from_records(data, None)?.breslow(beta)
}

/// Marginal Nelson-Aalen cumulative hazard from times and event flags.
pub fn nelson_aalen_from(times: &[f64], events: &[bool]) -> Result<StepFunction, CoxError> {
    if times.len() != events.len() {
        return Err(CoxError::DimensionMismatch { expected: times.len(), found: events.len() });
    }
    let rows = vec![Vec::new(); times.len()];
    CoxDesign::new(times, events, &rows, None)?.breslow(&[])
}

/// Marginal Nelson-Aalen estimate; ignores covariates, so missing `x` is allowed.
pub fn nelson_aalen(data: &[SurvivalRecord]) -> Result<StepFunction, CoxError> {
    let times: Vec<f64> = data.iter().map(|r| r.time).collect();
    let events: Vec<bool> = data.iter().map(|r| r.event).collect();
    nelson_aalen_from(&times, &events)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(t: f64, e: bool, x: f64) -> SurvivalRecord {
        SurvivalRecord::new(t, e, vec![], Some(x)).unwrap()
    }

    #[test]
    fn loglik_at_zero_is_minus_sum_log_risk_sizes() {
        let data = vec![rec(1.0, true, 0.3), rec(2.0, false, 1.0), rec(3.0, true, -1.0), rec(4.0, true, 2.0)];
        let ll = partial_loglik(&[0.0], &data, None).unwrap();
        let expected = -(4f64.ln() + 2f64.ln() + 1f64.ln());
        assert!((ll - expected).abs() < 1e-14);
    }

    #[test]
    fn two_subject_loglik() {
        let data = vec![rec(1.0, true, 1.0), rec(2.0, true, 0.0)];
        let ll = partial_loglik(&[0.5], &data, None).unwrap();
        let expected = 0.5 - (0.5f64.exp() + 1.0).ln();
        assert!((ll - expected).abs() < 1e-14);
    }

    #[test]
    fn gradient_vanishes_when_every_event_is_alone_at_risk() {
        // Events at the latest times only see themselves.
        let data = vec![rec(1.0, false, 0.2), rec(2.0, false, 1.5), rec(3.0, true, 0.7)];
        for b in [-2.0, 0.0, 3.0] {
            let (g, _) = score_and_info(&[b], &data, None).unwrap();
            assert!(g[0].abs() < 1e-14);
        }
    }

    #[test]
    fn no_events_is_an_error() {
        let data = vec![rec(1.0, false, 0.0), rec(2.0, false, 1.0)];
        assert_eq!(partial_loglik(&[0.0], &data, None), Err(CoxError::NoEvents));
        assert!(matches!(nelson_aalen(&data), Err(CoxError::NoEvents)));
    }

    #[test]
    fn mismatched_weights_rejected() {
        let data = vec![rec(1.0, true, 0.0), rec(2.0, true, 1.0)];
        assert!(matches!(
            partial_loglik(&[0.0], &data, Some(&[1.0])),
            Err(CoxError::DimensionMismatch { .. })
        ));
        assert!(matches!(partial_loglik(&[0.0, 1.0], &data, None), Err(CoxError::DimensionMismatch { .. })));
    }

    #[test]
    fn monotone_likelihood_reports_divergence() {
        // x = 1 subjects are all censored; every event has x = 0.
        let data = vec![
            rec(1.0, true, 0.0),
            rec(2.0, false, 1.0),
            rec(3.0, true, 0.0),
            rec(4.0, false, 1.0),
            rec(5.0, true, 0.0),
            rec(6.0, false, 1.0),
        ];
        let err = fit_cox(&data, None, None, &CoxOptions::default()).unwrap_err();
        assert!(matches!(err, CoxError::Diverged { .. }), "{err:?}");
    }

    #[test]
    fn nelson_aalen_simple() {
        let data = vec![rec(1.0, true, 0.0), rec(2.0, true, 0.0), rec(3.0, true, 0.0)];
        let h = nelson_aalen(&data).unwrap();
        assert_eq!(h.knots(), &[1.0, 2.0, 3.0]);
        let j = h.jumps();
        assert!((j[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((j[1] - 0.5).abs() < 1e-15);
        assert!((j[2] - 1.0).abs() < 1e-15);
        assert_eq!(h.eval(0.5), 0.0);
        assert!((h.eval(1.0) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn breslow_at_zero_matches_nelson_aalen() {
        let data = vec![rec(1.0, true, 0.2), rec(1.0, true, 1.0), rec(2.0, false, 0.3), rec(3.5, true, -0.4)];
        let a = breslow_cumhaz(&[0.0], &data).unwrap();
        let b = nelson_aalen(&data).unwrap();
        assert_eq!(a, b);
        // tied pair at t = 1: 2 events among 4 at risk
        assert!((a.eval(1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_event_jump_is_one_over_n() {
        let data = vec![rec(1.0, true, 0.2), rec(2.0, false, 1.0), rec(3.0, false, 0.3), rec(4.0, false, -0.4)];
        let h = breslow_cumhaz(&[0.0], &data).unwrap();
        assert_eq!(h.knots(), &[1.0]);
        assert!((h.values()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn step_function_rejects_unsorted_knots() {
        assert!(StepFunction::new(vec![1.0, 1.0], vec![0.1, 0.2]).is_err());
        assert!(StepFunction::new(vec![1.0], vec![0.1, 0.2]).is_err());
    }
}
