//! Wald-type intervals and p-values under normal or Student-t reference laws.

use statrs::distribution::{Continuous, ContinuousCDF, Normal, StudentsT};

// The incomplete-beta routines behind the t quantile lose accuracy for df
// beyond ~1e5 (and stop terminating near 1e8); above these thresholds the
// asymptotic expansions in 1/df are exact to double precision.
const QUANTILE_EXPANSION_DF: f64 = 1e4;
const TAIL_EXPANSION_DF: f64 = 1e6;

/// Two-sided 95% critical value for `df` degrees of freedom (`inf` = normal).
pub fn critical_value(df: f64) -> f64 {
    let z = Normal::standard().inverse_cdf(0.975);
    if !df.is_finite() {
        z
    } else if df > QUANTILE_EXPANSION_DF {
        // Cornish-Fisher expansion of the t quantile.
        let (z3, z5, z7) = (z.powi(3), z.powi(5), z.powi(7));
        z + (z3 + z) / (4.0 * df)
            + (5.0 * z5 + 16.0 * z3 + 3.0 * z) / (96.0 * df * df)
            + (3.0 * z7 + 19.0 * z5 + 17.0 * z3 - 15.0 * z) / (384.0 * df.powi(3))
    } else {
        StudentsT::new(0.0, 1.0, df).expect("df > 0").inverse_cdf(0.975)
    }
}

/// Two-sided p-value of the statistic `est / se`.
pub fn two_sided_p(est: f64, se: f64, df: f64) -> f64 {
    let stat = (est / se).abs();
    let normal = Normal::standard();
    let upper = if !df.is_finite() {
        normal.sf(stat)
    } else if df > TAIL_EXPANSION_DF {
        normal.sf(stat) + normal.pdf(stat) * (stat.powi(3) + stat) / (4.0 * df)
    } else {
        StudentsT::new(0.0, 1.0, df).expect("df > 0").sf(stat)
    };
    (2.0 * upper).min(1.0)
}

pub fn interval(est: f64, se: f64, df: f64) -> (f64, f64) {
    let c = critical_value(df) * se;
    (est - c, est + c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_reference_values() {
        assert!((critical_value(f64::INFINITY) - 1.959963984540054).abs() < 1e-9);
        assert_eq!(two_sided_p(0.0, 1.0, f64::INFINITY), 1.0);
        assert!((two_sided_p(1.959963984540054, 1.0, f64::INFINITY) - 0.05).abs() < 1e-9);
    }

    #[test]
    fn t_quantile_exceeds_normal() {
        assert!((critical_value(10.0) - 2.228138851986274).abs() < 1e-6);
        assert!(critical_value(10.0) > critical_value(f64::INFINITY));
    }

    #[test]
    fn huge_df_is_continuous_with_moderate_df() {
        for df in [QUANTILE_EXPANSION_DF * 0.999, QUANTILE_EXPANSION_DF * 1.001] {
            let exact = StudentsT::new(0.0, 1.0, df).unwrap().inverse_cdf(0.975);
            assert!((critical_value(df) - exact).abs() < 1e-11);
        }
        for df in [TAIL_EXPANSION_DF * 0.999, TAIL_EXPANSION_DF * 1.001] {
            for x in [0.3, 1.96, 4.0] {
                let exact = 2.0 * StudentsT::new(0.0, 1.0, df).unwrap().sf(x);
                assert!((two_sided_p(x, 1.0, df) / exact - 1.0).abs() < 1e-8);
            }
        }
        let z = critical_value(f64::INFINITY);
        for df in [1e8, 1.8e13, 1e300] {
            let c = critical_value(df);
            assert!(c >= z && c - z < 1e-7, "{df}: {c}");
            let p = two_sided_p(2.5, 1.0, df);
            assert!((p / two_sided_p(2.5, 1.0, f64::INFINITY) - 1.0).abs() < 1e-6);
        }
    }
}
