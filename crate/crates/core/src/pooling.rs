//! Rubin's rules for combining multiply imputed estimates.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoolError {
    #[error("pooling needs at least 2 imputations, got {0}")]
    TooFewImputations(usize),
    #[error("imputation {index} has {found} coefficients, expected {expected}")]
    DimensionMismatch { index: usize, expected: usize, found: usize },
    #[error("variance of coefficient {coef} in imputation {index} is not positive")]
    NonPositiveVariance { index: usize, coef: usize },
}

/// Pooled estimate; every vector is indexed by coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledEstimate {
    pub beta: Vec<f64>,
    /// Total variance `U + (1 + 1/M) B`.
    pub variance: Vec<f64>,
    /// Mean within-imputation variance `U`.
    pub within: Vec<f64>,
    /// Between-imputation variance `B` (divisor `M - 1`).
    pub between: Vec<f64>,
    /// Degrees of freedom; infinite when `B = 0`.
    #[serde(with = "crate::io::serde_inf_vec")]
    pub df: Vec<f64>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    /// Set where `B = 0`: the normal quantile replaces the t quantile.
    pub degenerate_between: Vec<bool>,
    pub m_used: usize,
}

impl PooledEstimate {
    pub fn se(&self) -> Vec<f64> {
        self.variance.iter().map(|v| v.sqrt()).collect()
    }

    pub fn p_values(&self) -> Vec<f64> {
        self.beta
            .iter()
            .zip(&self.variance)
            .zip(&self.df)
            .map(|((b, v), df)| inference::two_sided_p(*b, v.sqrt(), *df))
            .collect()
    }
}

/// Rubin degrees of freedom `(M - 1) [1 + U M / ((M + 1) B)]^2`.
pub fn rubin_df(m: usize, within: f64, between: f64) -> f64 {
    let m = m as f64;
    if between == 0.0 {
        return f64::INFINITY;
    }
    (m - 1.0) * (1.0 + within * m / ((m + 1.0) * between)).powi(2)
}

pub fn rubin_pool(estimates: &[Vec<f64>], variances: &[Vec<f64>]) -> Result<PooledEstimate, PoolError> {
    let m = estimates.len();
    if m < 2 {
        return Err(PoolError::TooFewImputations(m));
    }
    let d = estimates[0].len();
    for (index, (e, v)) in estimates.iter().zip(variances).enumerate() {
        for len in [e.len(), v.len()] {
            if len != d {
                return Err(PoolError::DimensionMismatch { index, expected: d, found: len });
            }
        }
        // Negated so that NaN is rejected too.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if let Some(coef) = v.iter().position(|x| !(*x > 0.0)) {
            return Err(PoolError::NonPositiveVariance { index, coef });
        }
    }
    if variances.len() != m {
        return Err(PoolError::DimensionMismatch { index: variances.len(), expected: m, found: variances.len() });
    }
    let mf = m as f64;
    let mut out = PooledEstimate {
        beta: Vec::with_capacity(d),
        variance: Vec::with_capacity(d),
        within: Vec::with_capacity(d),
        between: Vec::with_capacity(d),
        df: Vec::with_capacity(d),
        ci_lower: Vec::with_capacity(d),
        ci_upper: Vec::with_capacity(d),
        degenerate_between: Vec::with_capacity(d),
        m_used: m,
    };
    for k in 0..d {
        let first = estimates[0][k];
        let identical = estimates.iter().all(|e| e[k] == first);
        let (mean, between) = if identical {
            (first, 0.0)
        } else {
            let mean = estimates.iter().map(|e| e[k]).sum::<f64>() / mf;
            (mean, estimates.iter().map(|e| (e[k] - mean).powi(2)).sum::<f64>() / (mf - 1.0))
        };
        let within = variances.iter().map(|v| v[k]).sum::<f64>() / mf;
        let total = within + (1.0 + 1.0 / mf) * between;
        let df = rubin_df(m, within, between);
        let (lo, hi) = inference::interval(mean, total.sqrt(), df);
        out.beta.push(mean);
        out.variance.push(total);
        out.within.push(within);
        out.between.push(between);
        out.df.push(df);
        out.ci_lower.push(lo);
        out.ci_upper.push(hi);
        out.degenerate_between.push(between == 0.0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_point_example() {
        let est = vec![vec![1.0], vec![2.0], vec![3.0]];
        let var = vec![vec![1.0]; 3];
        let p = rubin_pool(&est, &var).unwrap();
        assert_eq!(p.beta[0], 2.0);
        assert_eq!(p.between[0], 1.0);
        assert_eq!(p.within[0], 1.0);
        assert!((p.variance[0] - 7.0 / 3.0).abs() < 1e-15);
        assert!((p.df[0] - 6.125).abs() < 1e-12);
        assert!(!p.degenerate_between[0]);
    }

    #[test]
    fn identical_estimates_take_normal_path() {
        let est = vec![vec![0.1]; 4];
        let var = vec![vec![0.25]; 4];
        let p = rubin_pool(&est, &var).unwrap();
        assert_eq!(p.beta[0], 0.1);
        assert_eq!(p.variance[0], 0.25);
        assert!(p.df[0].is_infinite());
        assert!(p.degenerate_between[0]);
        let half = 1.959963984540054 * 0.5;
        assert!((p.ci_upper[0] - (0.1 + half)).abs() < 1e-9);
    }

    #[test]
    fn input_validation() {
        assert_eq!(rubin_pool(&[vec![1.0]], &[vec![1.0]]), Err(PoolError::TooFewImputations(1)));
        assert!(matches!(rubin_pool(&[vec![1.0], vec![1.0, 2.0]], &[vec![1.0], vec![1.0]]), Err(PoolError::DimensionMismatch { .. })));
        assert!(matches!(rubin_pool(&[vec![1.0], vec![2.0]], &[vec![1.0], vec![0.0]]), Err(PoolError::NonPositiveVariance { .. })));
    }
}
