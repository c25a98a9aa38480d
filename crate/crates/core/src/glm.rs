//! Working-model regressions: binary GLMs (logit, complementary log-log) by
//! iteratively reweighted least squares, and ordinary least squares.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const PROB_CLAMP: f64 = 1e-10;
const SEPARATION_BOUND: f64 = 15.0;
const SCORE_TOL: f64 = 1e-8;
const MAX_IRLS_ITER: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Logit,
    /// `P(y = 1) = 1 - exp(-exp(eta))`
    Cloglog,
    Identity,
}

impl Link {
    pub fn is_binary(self) -> bool {
        !matches!(self, Link::Identity)
    }

    pub fn inverse(self, eta: f64) -> f64 {
        match self {
            Link::Logit => 1.0 / (1.0 + (-eta).exp()),
            Link::Cloglog => -(-eta.exp()).exp_m1(),
            Link::Identity => eta,
        }
    }

    /// d mu / d eta
    fn mu_eta(self, eta: f64) -> f64 {
        match self {
            Link::Logit => {
                let m = self.inverse(eta);
                m * (1.0 - m)
            }
            Link::Cloglog => {
                let e = eta.min(700.0).exp();
                e * (-e).exp()
            }
            Link::Identity => 1.0,
        }
    }

    fn start_intercept(self, mean: f64) -> f64 {
        let m = mean.clamp(1e-3, 1.0 - 1e-3);
        match self {
            Link::Logit => (m / (1.0 - m)).ln(),
            Link::Cloglog => (-(1.0 - m).ln()).ln(),
            Link::Identity => mean,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GlmError {
    #[error("response is constant; the model is not estimable")]
    DegenerateResponse,
    #[error("binary link requires a 0/1 response (row {row} = {value})")]
    NonBinaryResponse { row: usize, value: f64 },
    #[error("design has {rows} rows but needs at least {needed}")]
    TooFewRows { rows: usize, needed: usize },
    #[error("design matrix is numerically singular")]
    SingularDesign,
    #[error("separation detected: |coef| exceeded {SEPARATION_BOUND} after {iterations} iterations")]
    Separation { iterations: usize, fit: Box<GlmFit> },
    #[error("IRLS did not converge in {iterations} iterations")]
    NotConverged { iterations: usize, fit: Box<GlmFit> },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("probabilities are only defined for binary links")]
    NotBinaryLink,
}

/// Fitted working model. `coef[0]` is the intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct GlmFit {
    pub coef: Vec<f64>,
    pub link: Link,
    pub converged: bool,
    pub covariance: DMatrix<f64>,
    pub iterations: usize,
}

impl GlmFit {
    pub fn n_covariates(&self) -> usize {
        self.coef.len() - 1
    }
}

fn with_intercept(design: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, p) = design.shape();
    DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { design[(i, j - 1)] })
}

/// Fit a GLM with an intercept prepended to `design`.
pub fn fit_glm(design: &DMatrix<f64>, response: &[f64], link: Link) -> Result<GlmFit, GlmError> {
    let (n, p) = design.shape();
    if response.len() != n {
        return Err(GlmError::DimensionMismatch { expected: n, found: response.len() });
    }
    if n < p + 2 {
        return Err(GlmError::TooFewRows { rows: n, needed: p + 2 });
    }
    let x = with_intercept(design);
    match link {
        Link::Identity => fit_ols(&x, response),
        _ => fit_binary(&x, response, link),
    }
}

fn fit_ols(x: &DMatrix<f64>, y: &[f64]) -> Result<GlmFit, GlmError> {
    let (n, q) = x.shape();
    let yv = DVector::from_column_slice(y);
    let xtx = x.tr_mul(x);
    let chol = xtx.cholesky().ok_or(GlmError::SingularDesign)?;
    let coef = chol.solve(&x.tr_mul(&yv));
    let resid = &yv - x * &coef;
    let sigma2 = resid.norm_squared() / (n - q) as f64;
    Ok(GlmFit {
        coef: coef.iter().copied().collect(),
        link: Link::Identity,
        converged: true,
        covariance: chol.inverse() * sigma2,
        iterations: 1,
    })
}

struct IrlsState {
    deviance: f64,
    score: DVector<f64>,
    fisher: DMatrix<f64>,
    working: DVector<f64>,
    weights: DVector<f64>,
}

fn irls_state(x: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>, link: Link) -> IrlsState {
    let n = x.nrows();
    let eta = x * beta;
    let mut deviance = 0.0;
    let mut score_resid = DVector::zeros(n);
    let mut weights = DVector::zeros(n);
    let mut working = DVector::zeros(n);
    for i in 0..n {
        let mu = link.inverse(eta[i]).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let d = link.mu_eta(eta[i]).max(f64::MIN_POSITIVE);
        let var = mu * (1.0 - mu);
        deviance -= 2.0 * (y[i] * mu.ln() + (1.0 - y[i]) * (1.0 - mu).ln());
        score_resid[i] = (y[i] - mu) * d / var;
        weights[i] = d * d / var;
        working[i] = eta[i] + (y[i] - mu) / d;
    }
    let score = x.tr_mul(&score_resid);
    let wx = DMatrix::from_fn(n, x.ncols(), |i, j| x[(i, j)] * weights[i]);
    let fisher = x.tr_mul(&wx);
    IrlsState { deviance, score, fisher, working, weights }
}

fn fit_binary(x: &DMatrix<f64>, y: &[f64], link: Link) -> Result<GlmFit, GlmError> {
    if let Some(row) = y.iter().position(|&v| v != 0.0 && v != 1.0) {
        return Err(GlmError::NonBinaryResponse { row, value: y[row] });
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    if mean == 0.0 || mean == 1.0 {
        return Err(GlmError::DegenerateResponse);
    }
    let q = x.ncols();
    let mut beta = DVector::zeros(q);
    beta[0] = link.start_intercept(mean);
    let mut state = irls_state(x, y, &beta, link);
    let mut iterations = 0;
    let make_fit = |beta: &DVector<f64>, fisher: &DMatrix<f64>, converged: bool, iterations: usize| {
        let covariance = fisher
            .clone()
            .cholesky()
            .map(|c| c.inverse())
            .unwrap_or_else(|| DMatrix::from_element(q, q, f64::NAN));
        GlmFit { coef: beta.iter().copied().collect(), link, converged, covariance, iterations }
    };
    loop {
        if state.score.amax() < SCORE_TOL {
            if state.fisher.clone().cholesky().is_none() {
                return Err(GlmError::SingularDesign);
            }
            return Ok(make_fit(&beta, &state.fisher, true, iterations));
        }
        if iterations >= MAX_IRLS_ITER {
            return Err(GlmError::NotConverged { iterations, fit: Box::new(make_fit(&beta, &state.fisher, false, iterations)) });
        }
        iterations += 1;
        let wz = DVector::from_fn(x.nrows(), |i, _| state.weights[i] * state.working[i]);
        let target = state
            .fisher
            .clone()
            .cholesky()
            .ok_or(GlmError::SingularDesign)?
            .solve(&x.tr_mul(&wz));
        let direction = &target - &beta;
        let mut scale = 1.0;
        let mut candidate;
        let mut cand_state;
        loop {
            candidate = &beta + &direction * scale;
            cand_state = irls_state(x, y, &candidate, link);
            if cand_state.deviance <= state.deviance + 1e-10 * state.deviance.abs().max(1.0) || scale < 1e-6 {
                break;
            }
            scale *= 0.5;
        }
        beta = candidate;
        state = cand_state;
        if beta.amax() > SEPARATION_BOUND {
            return Err(GlmError::Separation { iterations, fit: Box::new(make_fit(&beta, &state.fisher, false, iterations)) });
        }
        // Rounding floor: the step no longer moves the coefficients.
        if (&direction * scale).amax() < 1e-13 * (1.0 + beta.amax()) && state.score.amax() < 1e-6 {
            return Ok(make_fit(&beta, &state.fisher, true, iterations));
        }
    }
}

/// Intercept plus the dot product of `row` with the slope coefficients.
pub fn linear_predictor(fit: &GlmFit, row: &[f64]) -> Result<f64, GlmError> {
    if row.len() + 1 != fit.coef.len() {
        return Err(GlmError::DimensionMismatch { expected: fit.coef.len() - 1, found: row.len() });
    }
    Ok(fit.coef[0] + fit.coef[1..].iter().zip(row).map(|(c, v)| c * v).sum::<f64>())
}

/// Fitted `P(response = 1)`, clamped to `[1e-10, 1 - 1e-10]`.
pub fn predict_prob(fit: &GlmFit, row: &[f64]) -> Result<f64, GlmError> {
    if !fit.link.is_binary() {
        return Err(GlmError::NotBinaryLink);
    }
    let eta = linear_predictor(fit, row)?;
    Ok(fit.link.inverse(eta).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))
}

/// Score vector `X'(y - mu) dmu/deta / var(mu)` of a binary fit on its data.
pub fn binary_score(fit: &GlmFit, design: &DMatrix<f64>, response: &[f64]) -> Vec<f64> {
    let x = with_intercept(design);
    let beta = DVector::from_column_slice(&fit.coef);
    irls_state(&x, response, &beta, fit.link).score.iter().copied().collect()
}
