//! Nonparametric nearest-neighbour multiple imputation.
//!
//! Each imputation draws a bootstrap sample, fits two working models on it
//! (one predicting `x`, one predicting whether `x` is observed), and reduces
//! every subject to a pair of standardized linear-predictor scores. A subject
//! with missing `x` receives the `x` of a donor drawn uniformly from its `nn`
//! nearest complete cases of the bootstrap sample under the weighted distance
//! `sqrt(w1 dSx^2 + w2 dSmiss^2)`. Cox fits on the `m` completed datasets are
//! combined with Rubin's rules.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{PreparedData, WorkingSpec};
use crate::glm::{fit_glm, linear_predictor, GlmError, GlmFit, Link};
use crate::pooling::{rubin_pool, PoolError, PooledEstimate};
use crate::rng::{self, StreamRng};
use crate::survival::{fit_cox, CoxError, CoxOptions, SurvivalRecord};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnmiError {
    #[error("invalid imputation config: {0}")]
    InvalidConfig(String),
    #[error("x working model: {0}")]
    CovariateModel(GlmError),
    #[error("missingness working model: {0}")]
    MissingnessModel(GlmError),
    #[error("predictive score has zero spread in the bootstrap sample")]
    DegenerateScore,
    #[error("no complete cases available as donors")]
    EmptyDonorPool,
    #[error("{available} complete cases, need at least nn = {needed}")]
    InsufficientDonors { available: usize, needed: usize },
    #[error("bootstrap redraw budget exhausted after {attempts} attempts: {last}")]
    RedrawBudgetExhausted { attempts: usize, last: Box<NnmiError> },
    #[error("imputation {replicate} failed: {reason}")]
    ImputationFailed { replicate: usize, reason: String },
    #[error(transparent)]
    Cox(#[from] CoxError),
    #[error(transparent)]
    Pool(#[from] PoolError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CovariateKind {
    /// Binary when every observed value is 0 or 1.
    #[default]
    Auto,
    Binary,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationConfig {
    pub nn: usize,
    pub w1: f64,
    pub w2: f64,
    pub m: usize,
    pub seed: u64,
    pub spec_x: WorkingSpec,
    pub spec_miss: WorkingSpec,
    pub x_kind: CovariateKind,
    pub max_redraws: usize,
}

impl Default for ImputationConfig {
    fn default() -> Self {
        Self {
            nn: 5,
            w1: 0.8,
            w2: 0.2,
            m: 10,
            seed: 0,
            spec_x: WorkingSpec::covariate_full(),
            spec_miss: WorkingSpec::selection_full(),
            x_kind: CovariateKind::Auto,
            max_redraws: 10,
        }
    }
}

impl ImputationConfig {
    pub fn validate(&self) -> Result<(), NnmiError> {
        let bad = |s: String| Err(NnmiError::InvalidConfig(s));
        if self.nn < 1 {
            return bad("nn must be >= 1".into());
        }
        if self.m < 2 {
            return bad(format!("m must be >= 2, got {}", self.m));
        }
        if !(self.w1 >= 0.0 && self.w2 >= 0.0) {
            return bad("weights must be nonnegative".into());
        }
        if (self.w1 + self.w2 - 1.0).abs() > 1e-9 {
            return bad(format!("weights must sum to one, got {} + {}", self.w1, self.w2));
        }
        Ok(())
    }

    fn x_link(&self, data: &[SurvivalRecord]) -> Link {
        match self.x_kind {
            CovariateKind::Binary => Link::Logit,
            CovariateKind::Continuous => Link::Identity,
            CovariateKind::Auto => {
                if data.iter().filter_map(|r| r.x).all(|x| x == 0.0 || x == 1.0) {
                    Link::Logit
                } else {
                    Link::Identity
                }
            }
        }
    }
}

/// Standardized `(x score, missingness score)` of one subject.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorePair {
    pub s_x: f64,
    pub s_miss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub sd: f64,
}

impl Standardizer {
    pub fn from_scores(scores: &[f64]) -> Self {
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let sd = (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        Self { mean, sd }
    }

    pub fn apply(&self, raw: f64) -> Result<f64, NnmiError> {
        if !(self.sd > 0.0 && self.sd.is_finite()) {
            return Err(NnmiError::DegenerateScore);
        }
        Ok((raw - self.mean) / self.sd)
    }
}

/// Working models fitted on one bootstrap sample plus the moments of their
/// linear predictors over that sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreModels {
    pub x_model: GlmFit,
    pub miss_model: GlmFit,
    pub x_std: Standardizer,
    pub miss_std: Standardizer,
    pub spec_x: WorkingSpec,
    pub spec_miss: WorkingSpec,
}

impl ScoreModels {
    pub fn raw_scores(&self, rec: &SurvivalRecord, cumhaz: f64) -> Result<(f64, f64), NnmiError> {
        let sx = linear_predictor(&self.x_model, &self.spec_x.row(rec, cumhaz)).map_err(NnmiError::CovariateModel)?;
        let sm = linear_predictor(&self.miss_model, &self.spec_miss.row(rec, cumhaz)).map_err(NnmiError::MissingnessModel)?;
        Ok((sx, sm))
    }
}

/// Fit the x model on the complete cases of `sample` and the missingness
/// model on all of `sample`; `sample` indexes rows of `data` with replacement.
pub fn fit_score_models(
    data: &PreparedData<'_>,
    sample: &[usize],
    spec_x: &WorkingSpec,
    spec_miss: &WorkingSpec,
    x_link: Link,
) -> Result<ScoreModels, NnmiError> {
    let recs = data.records;
    let complete: Vec<usize> = sample.iter().copied().filter(|&i| recs[i].is_observed()).collect();
    let xs: Vec<f64> = complete.iter().map(|&i| recs[i].x.unwrap_or_default()).collect();
    let x_model = fit_glm(&data.design(spec_x, &complete), &xs, x_link).map_err(NnmiError::CovariateModel)?;
    let observed: Vec<f64> = sample.iter().map(|&i| if recs[i].is_observed() { 1.0 } else { 0.0 }).collect();
    let miss_model = fit_glm(&data.design(spec_miss, sample), &observed, Link::Logit).map_err(NnmiError::MissingnessModel)?;
    let placeholder = Standardizer { mean: 0.0, sd: 1.0 };
    let mut models = ScoreModels {
        x_model,
        miss_model,
        x_std: placeholder,
        miss_std: placeholder,
        spec_x: spec_x.clone(),
        spec_miss: spec_miss.clone(),
    };
    let mut sx = Vec::with_capacity(sample.len());
    let mut sm = Vec::with_capacity(sample.len());
    for &i in sample {
        let (a, b) = models.raw_scores(&recs[i], data.cumhaz[i])?;
        sx.push(a);
        sm.push(b);
    }
    models.x_std = Standardizer::from_scores(&sx);
    models.miss_std = Standardizer::from_scores(&sm);
    Ok(models)
}

/// Standardized scores of one subject under bootstrap-fitted models.
pub fn score_original(rec: &SurvivalRecord, cumhaz: f64, models: &ScoreModels) -> Result<ScorePair, NnmiError> {
    let (sx, sm) = models.raw_scores(rec, cumhaz)?;
    Ok(ScorePair { s_x: models.x_std.apply(sx)?, s_miss: models.miss_std.apply(sm)? })
}

pub fn nn_distance(a: ScorePair, b: ScorePair, w1: f64, w2: f64) -> f64 {
    (w1 * (a.s_x - b.s_x).powi(2) + w2 * (a.s_miss - b.s_miss).powi(2)).sqrt()
}

/// Indices of the `nn` donors closest to `target`, nearest first. Ties are
/// broken by the lower donor index.
pub fn select_imputing_set(
    target: ScorePair,
    donors: &[(usize, ScorePair)],
    nn: usize,
    w1: f64,
    w2: f64,
) -> Result<Vec<usize>, NnmiError> {
    if donors.is_empty() {
        return Err(NnmiError::EmptyDonorPool);
    }
    let mut ranked: Vec<(f64, usize)> = donors.iter().map(|&(idx, s)| (nn_distance(target, s, w1, w2), idx)).collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if nn < ranked.len() {
        ranked.select_nth_unstable_by(nn - 1, cmp);
        ranked.truncate(nn);
    }
    ranked.sort_by(cmp);
    Ok(ranked.into_iter().map(|(_, idx)| idx).collect())
}

/// Where an imputed value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImputedCell {
    /// Row of the completed dataset.
    pub row: usize,
    /// Original row whose observed `x` was copied.
    pub donor_row: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImputedData {
    pub records: Vec<SurvivalRecord>,
    pub imputed: Vec<ImputedCell>,
    /// Bootstrap samples discarded because a working model failed.
    pub redraws: usize,
    /// The bootstrap sample the donors were drawn from.
    pub bootstrap: Vec<usize>,
}

/// Reusable per-dataset state: hazard covariate and the x-model link.
pub struct Imputer<'a> {
    data: PreparedData<'a>,
    config: &'a ImputationConfig,
    x_link: Link,
    missing: Vec<usize>,
}

impl<'a> Imputer<'a> {
    pub fn new(records: &'a [SurvivalRecord], config: &'a ImputationConfig) -> Result<Self, NnmiError> {
        config.validate()?;
        let available = records.iter().filter(|r| r.is_observed()).count();
        let missing: Vec<usize> = (0..records.len()).filter(|&i| !records[i].is_observed()).collect();
        if !missing.is_empty() && available < config.nn {
            return Err(NnmiError::InsufficientDonors { available, needed: config.nn });
        }
        Ok(Self { data: PreparedData::new(records)?, x_link: config.x_link(records), config, missing })
    }

    pub fn prepared(&self) -> &PreparedData<'a> {
        &self.data
    }

    pub fn impute(&self, rng: &mut StreamRng) -> Result<ImputedData, NnmiError> {
        let recs = self.data.records;
        if self.missing.is_empty() {
            return Ok(ImputedData { records: recs.to_vec(), imputed: Vec::new(), redraws: 0, bootstrap: Vec::new() });
        }
        let n = recs.len();
        let mut last = None;
        for attempt in 0..=self.config.max_redraws {
            let sample: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            match self.impute_from(&sample, rng) {
                Ok(imputed) => {
                    let mut out = recs.to_vec();
                    for c in &imputed {
                        out[c.row].x = recs[c.donor_row].x;
                    }
                    return Ok(ImputedData { records: out, imputed, redraws: attempt, bootstrap: sample });
                }
                Err(e) => last = Some(e),
            }
        }
        Err(NnmiError::RedrawBudgetExhausted {
            attempts: self.config.max_redraws + 1,
            last: Box::new(last.unwrap_or(NnmiError::EmptyDonorPool)),
        })
    }

    fn impute_from(&self, sample: &[usize], rng: &mut StreamRng) -> Result<Vec<ImputedCell>, NnmiError> {
        let recs = self.data.records;
        let cfg = self.config;
        let models = fit_score_models(&self.data, sample, &cfg.spec_x, &cfg.spec_miss, self.x_link)?;
        let donors = sample
            .iter()
            .enumerate()
            .filter(|(_, &i)| recs[i].is_observed())
            .map(|(k, &i)| Ok((k, score_original(&recs[i], self.data.cumhaz[i], &models)?)))
            .collect::<Result<Vec<_>, NnmiError>>()?;
        let mut cells = Vec::with_capacity(self.missing.len());
        for &j in &self.missing {
            let target = score_original(&recs[j], self.data.cumhaz[j], &models)?;
            let set = select_imputing_set(target, &donors, cfg.nn, cfg.w1, cfg.w2)?;
            let pick = set[rng.random_range(0..set.len())];
            cells.push(ImputedCell { row: j, donor_row: sample[pick] });
        }
        Ok(cells)
    }
}

/// One completed dataset; observed values are left untouched.
pub fn impute_once(
    dataset: &[SurvivalRecord],
    config: &ImputationConfig,
    rng: &mut StreamRng,
) -> Result<ImputedData, NnmiError> {
    Imputer::new(dataset, config)?.impute(rng)
}

/// `m` completed datasets; dataset `k` uses the stream `(seed, k)`.
pub fn impute_many(dataset: &[SurvivalRecord], config: &ImputationConfig) -> Result<Vec<ImputedData>, NnmiError> {
    let imputer = Imputer::new(dataset, config)?;
    (0..config.m)
        .into_par_iter()
        .map(|k| {
            imputer
                .impute(&mut rng::stream(config.seed, &[k as u64]))
                .map_err(|e| NnmiError::ImputationFailed { replicate: k, reason: e.to_string() })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NnmiResult {
    pub pooled: PooledEstimate,
    pub estimates: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
    pub redraws: usize,
}

/// Impute `m` times, fit the Cox model on `(x, z)` in each, and pool.
pub fn nnmi_estimate(
    dataset: &[SurvivalRecord],
    config: &ImputationConfig,
    cox: &CoxOptions,
) -> Result<NnmiResult, NnmiError> {
    if !dataset.iter().any(|r| r.event) {
        return Err(CoxError::NoEvents.into());
    }
    let imputer = Imputer::new(dataset, config)?;
    let fits: Vec<(Vec<f64>, Vec<f64>, usize)> = (0..config.m)
        .into_par_iter()
        .map(|k| {
            let failed = |reason: String| NnmiError::ImputationFailed { replicate: k, reason };
            let imp = imputer.impute(&mut rng::stream(config.seed, &[k as u64])).map_err(|e| failed(e.to_string()))?;
            let fit = fit_cox(&imp.records, None, None, cox).map_err(|e| failed(e.to_string()))?;
            Ok((fit.beta.clone(), fit.variances(), imp.redraws))
        })
        .collect::<Result<_, NnmiError>>()?;
    let estimates: Vec<Vec<f64>> = fits.iter().map(|f| f.0.clone()).collect();
    let variances: Vec<Vec<f64>> = fits.iter().map(|f| f.1.clone()).collect();
    let pooled = rubin_pool(&estimates, &variances)?;
    Ok(NnmiResult { pooled, estimates, variances, redraws: fits.iter().map(|f| f.2).sum() })
}
