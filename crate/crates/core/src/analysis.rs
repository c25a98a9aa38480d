//! End-to-end analysis of a loaded dataset with the complete-case, AIPW and
//! NNMI estimators.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aipw::{aipw_bootstrap_se, AipwError, AipwOptions};
use crate::cc::{fit_complete_case, CcError};
use crate::io::{LoadedData, MethodResult};
use crate::nnmi::{nnmi_estimate, ImputationConfig, NnmiError};
use crate::survival::CoxOptions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnalysisMethod {
    Cc,
    Aipw,
    Nnmi,
}

impl fmt::Display for AnalysisMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnalysisMethod::Cc => "CC",
            AnalysisMethod::Aipw => "AIPW",
            AnalysisMethod::Nnmi => "NNMI",
        })
    }
}

impl FromStr for AnalysisMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "cc" => Ok(AnalysisMethod::Cc),
            "aipw" => Ok(AnalysisMethod::Aipw),
            "nnmi" => Ok(AnalysisMethod::Nnmi),
            other => Err(format!("unknown method '{other}' (cc, aipw, nnmi)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("complete-case: {0}")]
    Cc(CcError),
    #[error("AIPW: {0}")]
    Aipw(AipwError),
    #[error("NNMI: {0}")]
    Nnmi(NnmiError),
}

// Plain conversions: the messages already embed the inner error, so it is
// not exposed again as a source.
impl From<CcError> for AnalysisError {
    fn from(e: CcError) -> Self {
        AnalysisError::Cc(e)
    }
}

impl From<AipwError> for AnalysisError {
    fn from(e: AipwError) -> Self {
        AnalysisError::Aipw(e)
    }
}

impl From<NnmiError> for AnalysisError {
    fn from(e: NnmiError) -> Self {
        AnalysisError::Nnmi(e)
    }
}

/// The AIPW selection and covariate models reuse `imputation.spec_miss` and
/// `imputation.spec_x`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub methods: Vec<AnalysisMethod>,
    pub imputation: ImputationConfig,
    pub aipw_bootstrap: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            methods: vec![AnalysisMethod::Cc, AnalysisMethod::Aipw, AnalysisMethod::Nnmi],
            imputation: ImputationConfig { m: 50, ..ImputationConfig::default() },
            aipw_bootstrap: 500,
        }
    }
}

pub fn run_analysis(data: &LoadedData, config: &AnalysisConfig) -> Result<Vec<MethodResult>, AnalysisError> {
    let names = data.covariate_names();
    let cox = CoxOptions::default();
    let mut out = Vec::new();
    for &method in &config.methods {
        let label = method.to_string();
        let result = match method {
            AnalysisMethod::Cc => {
                let fit = fit_complete_case(&data.records, &cox)?;
                MethodResult::from_wald(&label, &names, &fit.beta, &fit.se())
            }
            AnalysisMethod::Aipw => {
                let imp = &config.imputation;
                let seed = crate::rng::derive_seed(imp.seed, &[u64::MAX]);
                let r = aipw_bootstrap_se(&data.records, &imp.spec_miss, &imp.spec_x, config.aipw_bootstrap, seed, &AipwOptions::default())?;
                if r.diverged {
                    return Err(AipwError::Diverged.into());
                }
                MethodResult::from_wald(&label, &names, &r.beta, &r.se)
            }
            AnalysisMethod::Nnmi => {
                let r = nnmi_estimate(&data.records, &config.imputation, &cox)?;
                MethodResult::from_pooled(&label, &names, &r.pooled)
            }
        };
        out.push(result);
    }
    Ok(out)
}
