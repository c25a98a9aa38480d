//! Complete-case Cox estimation.

use thiserror::Error;

use crate::survival::{fit_cox, CoxError, CoxFit, CoxOptions, SurvivalRecord};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CcError {
    #[error("no subject has the covariate observed")]
    EmptyCompleteSet,
    #[error(transparent)]
    Cox(#[from] CoxError),
}

/// Subjects with `x` observed.
pub fn complete_cases(dataset: &[SurvivalRecord]) -> Vec<SurvivalRecord> {
    dataset.iter().filter(|r| r.is_observed()).cloned().collect()
}

/// Cox fit on `(x, z)` restricted to subjects with `x` observed.
pub fn fit_complete_case(dataset: &[SurvivalRecord], opts: &CoxOptions) -> Result<CoxFit, CcError> {
    let complete = complete_cases(dataset);
    if complete.is_empty() {
        return Err(CcError::EmptyCompleteSet);
    }
    Ok(fit_cox(&complete, None, None, opts)?)
}
