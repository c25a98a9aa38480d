//! Generative survival model with a covariate missing at random, and the
//! Monte Carlo harness comparing estimators on it.
//!
//! Data follow `Z ~ U(0,1)`, `X ~ Bernoulli(p(Z))`, exponential failure and
//! censoring times with rates `exp(beta'(X,Z))` and `exp(theta'(X,Z))`, and an
//! observation indicator for `X` drawn from a selection law in `(Z, Y)`.
//! Both laws are written as `1 / (1 + exp(lin))` (logit) or
//! `exp(-exp(lin))` (complementary log-log).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aipw::{aipw_bootstrap_se, AipwOptions};
use crate::cc::fit_complete_case;
use crate::features::WorkingSpec;
use crate::inference;
use crate::io::fmt_sig;
use crate::nnmi::{nnmi_estimate, ImputationConfig};
use crate::rng::{self, derive_seed};
use crate::survival::{fit_cox, CoxOptions, SurvivalRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "lowercase")]
pub enum CovariateLaw {
    Constant { p: f64 },
    /// `p(z) = 1 / (1 + exp(a0 + a1 z))`
    Logit { a0: f64, a1: f64 },
    /// `p(z) = exp(-exp(a0 + a1 z))`
    Cloglog { a0: f64, a1: f64 },
}

impl CovariateLaw {
    pub fn prob(&self, z: f64) -> f64 {
        match *self {
            CovariateLaw::Constant { p } => p,
            CovariateLaw::Logit { a0, a1 } => 1.0 / (1.0 + (a0 + a1 * z).exp()),
            CovariateLaw::Cloglog { a0, a1 } => (-(a0 + a1 * z).exp()).exp(),
        }
    }

    /// `E[p(Z)]` for `Z ~ U(0,1)` by composite Simpson quadrature.
    pub fn mean_prob(&self) -> f64 {
        let k = 2000;
        let h = 1.0 / k as f64;
        let s: f64 = (0..=k)
            .map(|i| {
                let w = if i == 0 || i == k { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                w * self.prob(i as f64 * h)
            })
            .sum();
        s * h / 3.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "lowercase")]
pub enum SelectionLaw {
    /// `P(x observed) = 1 / (1 + exp(e0 + ez z + ey y))`
    Logit { e0: f64, ez: f64, ey: f64 },
    /// `P(x observed) = exp(-exp(e0 + ez z + ey y))`
    Cloglog { e0: f64, ez: f64, ey: f64 },
}

impl SelectionLaw {
    pub fn prob_observed(&self, z: f64, y: f64) -> f64 {
        match *self {
            SelectionLaw::Logit { e0, ez, ey } => 1.0 / (1.0 + (e0 + ez * z + ey * y).exp()),
            SelectionLaw::Cloglog { e0, ez, ey } => (-(e0 + ez * z + ey * y).exp()).exp(),
        }
    }

    fn with_intercept(&self, e0: f64) -> Self {
        match *self {
            SelectionLaw::Logit { ez, ey, .. } => SelectionLaw::Logit { e0, ez, ey },
            SelectionLaw::Cloglog { ez, ey, .. } => SelectionLaw::Cloglog { e0, ez, ey },
        }
    }

    fn coefficients(&self) -> (f64, f64, f64) {
        match *self {
            SelectionLaw::Logit { e0, ez, ey } | SelectionLaw::Cloglog { e0, ez, ey } => (e0, ez, ey),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LawLink {
    Constant,
    Logit,
    Cloglog,
}

impl FromStr for LawLink {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "constant" => Ok(LawLink::Constant),
            "logit" => Ok(LawLink::Logit),
            "cloglog" => Ok(LawLink::Cloglog),
            other => Err(format!("unknown link '{other}' (constant, logit, cloglog)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub label: String,
    pub n: usize,
    pub beta_x: f64,
    pub beta_z: f64,
    pub theta_x: f64,
    pub theta_z: f64,
    pub x_law: CovariateLaw,
    pub miss_law: SelectionLaw,
    /// Calibration notes for derived laws.
    #[serde(default)]
    pub notes: Vec<String>,
}

const CALIBRATION_SEED: u64 = 0x00C0_FFEE;
const CALIBRATION_N: usize = 200_000;

fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    // f is monotone on [lo, hi] with a sign change
    let flo = f(lo);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if (f(mid) > 0.0) == (flo > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

impl Scenario {
    /// `X ~ Bernoulli(0.5)`, dependent censoring, missingness driven by `(Z, Y)`.
    pub fn table4(n: usize) -> Self {
        Self {
            label: format!("table4-n{n}"),
            n,
            beta_x: 2f64.ln(),
            beta_z: -(2f64.ln()),
            theta_x: -2.0,
            theta_z: 0.1,
            x_law: CovariateLaw::Constant { p: 0.5 },
            miss_law: SelectionLaw::Logit { e0: 1.5, ez: 0.5, ey: -2.0 },
            notes: Vec::new(),
        }
    }

    /// As [`Scenario::table4`] but with `X` depending on `Z` through a logit law.
    pub fn table5(n: usize) -> Self {
        Self {
            label: format!("table5-n{n}"),
            x_law: CovariateLaw::Logit { a0: 0.25, a1: -0.5 },
            ..Self::table4(n)
        }
    }

    pub fn by_name(name: &str, n: usize) -> Option<Self> {
        match name {
            "table4" => Some(Self::table4(n)),
            "table5" => Some(Self::table5(n)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.n < 20 {
            return Err(format!("n must be >= 20, got {}", self.n));
        }
        let finite = [self.beta_x, self.beta_z, self.theta_x, self.theta_z];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err("scenario coefficients must be finite".into());
        }
        for z in [0.0, 0.5, 1.0] {
            let p = self.x_law.prob(z);
            if !(p > 0.0 && p < 1.0) {
                return Err(format!("x law gives probability {p} at z = {z}"));
            }
        }
        Ok(())
    }

    /// Re-express the covariate law under another link, holding `E[p(Z)]` fixed.
    pub fn with_x_link(mut self, link: LawLink) -> Self {
        let target = self.x_law.mean_prob();
        let slope = match self.x_law {
            CovariateLaw::Constant { .. } => 0.0,
            CovariateLaw::Logit { a1, .. } | CovariateLaw::Cloglog { a1, .. } => a1,
        };
        let new_law = match link {
            LawLink::Constant => CovariateLaw::Constant { p: target },
            LawLink::Logit => {
                let a0 = bisect(-30.0, 30.0, |c| CovariateLaw::Logit { a0: c, a1: slope }.mean_prob() - target);
                CovariateLaw::Logit { a0, a1: slope }
            }
            LawLink::Cloglog => {
                let a0 = bisect(-30.0, 30.0, |c| CovariateLaw::Cloglog { a0: c, a1: slope }.mean_prob() - target);
                CovariateLaw::Cloglog { a0, a1: slope }
            }
        };
        if new_law != self.x_law {
            self.notes.push(format!("x law {:?} calibrated to mean probability {:.6}", new_law, target));
            self.label.push_str(&format!("-x{}", link_name(link)));
            self.x_law = new_law;
        }
        self
    }

    /// Re-express the selection law under another link with the slopes kept
    /// and the intercept searched so the expected missing rate is unchanged.
    pub fn with_miss_link(mut self, link: LawLink) -> Result<Self, String> {
        let (_, ez, ey) = self.miss_law.coefficients();
        let current_is = |l: LawLink| matches!((&self.miss_law, l), (SelectionLaw::Logit { .. }, LawLink::Logit) | (SelectionLaw::Cloglog { .. }, LawLink::Cloglog));
        if current_is(link) {
            return Ok(self);
        }
        let template = match link {
            LawLink::Logit => SelectionLaw::Logit { e0: 0.0, ez, ey },
            LawLink::Cloglog => SelectionLaw::Cloglog { e0: 0.0, ez, ey },
            LawLink::Constant => return Err("the selection law needs a logit or cloglog link".into()),
        };
        // Expected missing rate over a fixed large draw of (Z, Y).
        let big = Scenario { n: CALIBRATION_N, ..self.clone() };
        let sim = generate_dataset(&big, &mut rng::stream(CALIBRATION_SEED, &[]));
        let zy: Vec<(f64, f64)> = sim.records.iter().map(|r| (r.z[0], r.time)).collect();
        let rate = |law: &SelectionLaw| zy.iter().map(|&(z, y)| 1.0 - law.prob_observed(z, y)).sum::<f64>() / zy.len() as f64;
        let target = rate(&self.miss_law);
        let e0 = bisect(-30.0, 30.0, |c| rate(&template.with_intercept(c)) - target);
        self.miss_law = template.with_intercept(e0);
        self.notes.push(format!(
            "selection law intercept calibrated to {e0:.6} for expected missing rate {target:.6} (slopes {ez}, {ey})"
        ));
        self.label.push_str(&format!("-m{}", link_name(link)));
        Ok(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

fn link_name(l: LawLink) -> &'static str {
    match l {
        LawLink::Constant => "constant",
        LawLink::Logit => "logit",
        LawLink::Cloglog => "cloglog",
    }
}

/// The `table4` and `table5` designs at n = 200 and 400, plus their cloglog variants.
pub fn builtin_scenarios() -> Vec<Scenario> {
    let mut out = Vec::new();
    for n in [200, 400] {
        out.push(Scenario::table4(n));
        out.push(Scenario::table5(n));
    }
    for n in [200, 400] {
        out.push(Scenario::table4(n).with_miss_link(LawLink::Cloglog).expect("cloglog selection"));
        out.push(
            Scenario::table5(n)
                .with_x_link(LawLink::Cloglog)
                .with_miss_link(LawLink::Cloglog)
                .expect("cloglog selection"),
        );
    }
    out
}

/// Generated data: `records` carry `x` only where observed; `full_x` holds
/// every subject's true value.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedData {
    pub records: Vec<SurvivalRecord>,
    pub full_x: Vec<f64>,
}

impl SimulatedData {
    /// The data before missingness was applied.
    pub fn fully_observed(&self) -> Vec<SurvivalRecord> {
        self.records.iter().zip(&self.full_x).map(|(r, &x)| r.with_x(x)).collect()
    }

    pub fn censoring_rate(&self) -> f64 {
        self.records.iter().filter(|r| !r.event).count() as f64 / self.records.len() as f64
    }

    pub fn missing_rate(&self) -> f64 {
        self.records.iter().filter(|r| !r.is_observed()).count() as f64 / self.records.len() as f64
    }
}

/// One simulated subject before censoring and missingness are applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentSubject {
    pub z: f64,
    pub x: f64,
    pub failure: f64,
    pub censoring: f64,
    pub observed: bool,
}

impl LatentSubject {
    pub fn record(&self) -> SurvivalRecord {
        let y = self.failure.min(self.censoring);
        SurvivalRecord { time: y, event: self.failure <= self.censoring, z: vec![self.z], x: self.observed.then_some(self.x) }
    }
}

pub fn draw_subject<R: Rng + ?Sized>(scenario: &Scenario, rng: &mut R) -> LatentSubject {
    let z: f64 = rng.random();
    let x = if rng.random::<f64>() < scenario.x_law.prob(z) { 1.0 } else { 0.0 };
    let t_rate = (scenario.beta_x * x + scenario.beta_z * z).exp();
    let c_rate = (scenario.theta_x * x + scenario.theta_z * z).exp();
    let failure = rng.sample::<f64, _>(Exp1) / t_rate;
    let censoring = rng.sample::<f64, _>(Exp1) / c_rate;
    let observed = rng.random::<f64>() < scenario.miss_law.prob_observed(z, failure.min(censoring));
    LatentSubject { z, x, failure, censoring, observed }
}

pub fn generate_dataset<R: Rng + ?Sized>(scenario: &Scenario, rng: &mut R) -> SimulatedData {
    let (records, full_x) = (0..scenario.n)
        .map(|_| {
            let s = draw_subject(scenario, rng);
            (s.record(), s.x)
        })
        .unzip();
    SimulatedData { records, full_x }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "FO")]
    Fo,
    #[serde(rename = "CC")]
    Cc,
    #[serde(rename = "AIPW11")]
    Aipw11,
    #[serde(rename = "AIPW12")]
    Aipw12,
    #[serde(rename = "AIPW21")]
    Aipw21,
    #[serde(rename = "NNMI11")]
    Nnmi11,
    #[serde(rename = "NNMI12")]
    Nnmi12,
    #[serde(rename = "NNMI21")]
    Nnmi21,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Fo,
        Method::Cc,
        Method::Aipw11,
        Method::Aipw12,
        Method::Aipw21,
        Method::Nnmi11,
        Method::Nnmi12,
        Method::Nnmi21,
    ];

    pub fn is_aipw(self) -> bool {
        matches!(self, Method::Aipw11 | Method::Aipw12 | Method::Aipw21)
    }

    pub fn is_nnmi(self) -> bool {
        matches!(self, Method::Nnmi11 | Method::Nnmi12 | Method::Nnmi21)
    }

    /// `(covariate model, selection model)` specifications. The first digit
    /// of the subscript refers to the covariate model, the second to the
    /// selection model; 1 = all correct inputs, 2 = an input omitted.
    pub fn working_specs(self) -> Option<(WorkingSpec, WorkingSpec)> {
        match self {
            Method::Aipw11 | Method::Nnmi11 => Some((WorkingSpec::covariate_full(), WorkingSpec::selection_full())),
            Method::Aipw12 | Method::Nnmi12 => Some((WorkingSpec::covariate_full(), WorkingSpec::selection_reduced())),
            Method::Aipw21 | Method::Nnmi21 => Some((WorkingSpec::covariate_reduced(), WorkingSpec::selection_full())),
            Method::Fo | Method::Cc => None,
        }
    }

    fn index(self) -> u64 {
        Method::ALL.iter().position(|&m| m == self).unwrap_or(0) as u64
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Method::Fo => "FO",
            Method::Cc => "CC",
            Method::Aipw11 => "AIPW11",
            Method::Aipw12 => "AIPW12",
            Method::Aipw21 => "AIPW21",
            Method::Nnmi11 => "NNMI11",
            Method::Nnmi12 => "NNMI12",
            Method::Nnmi21 => "NNMI21",
        };
        f.write_str(s)
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let key = s.to_ascii_uppercase().replace('_', "");
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.to_string() == key)
            .ok_or_else(|| format!("unknown method '{s}'"))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonteCarloConfig {
    pub replicates: usize,
    pub master_seed: u64,
    pub methods: Vec<Method>,
    /// Bootstrap resamples for AIPW standard errors.
    pub aipw_bootstrap: usize,
    /// NNMI settings; the seed is replaced per replicate.
    pub imputation: ImputationConfig,
    pub aipw: AipwOptions,
    #[serde(skip)]
    pub progress: bool,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self {
            replicates: 500,
            master_seed: 1,
            methods: Method::ALL.to_vec(),
            aipw_bootstrap: 500,
            imputation: ImputationConfig::default(),
            aipw: AipwOptions::default(),
            progress: false,
        }
    }
}

/// One method's estimate on one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
}

impl Outcome {
    fn wald(estimate: Vec<f64>, se: Vec<f64>) -> Self {
        let (ci_lower, ci_upper) = estimate.iter().zip(&se).map(|(&b, &s)| inference::interval(b, s, f64::INFINITY)).unzip();
        Self { estimate, se, ci_lower, ci_upper }
    }
}

/// Per-replicate results in `config.methods` order.
#[derive(Debug, Clone)]
pub struct ReplicateResult {
    pub outcomes: Vec<Option<Outcome>>,
    pub censoring_rate: f64,
    pub missing_rate: f64,
}

pub fn run_replicate(scenario: &Scenario, config: &MonteCarloConfig, rep: usize) -> ReplicateResult {
    let seed = config.master_seed;
    let cox = CoxOptions::default();
    let sim = generate_dataset(scenario, &mut rng::stream(seed, &[rep as u64, 0]));
    let outcomes = config
        .methods
        .iter()
        .map(|&method| {
            let method_seed = derive_seed(seed, &[rep as u64, 1, method.index()]);
            match method {
                Method::Fo => fit_cox(&sim.fully_observed(), None, None, &cox).ok().map(|f| Outcome::wald(f.beta.clone(), f.se())),
                Method::Cc => fit_complete_case(&sim.records, &cox).ok().map(|f| Outcome::wald(f.beta.clone(), f.se())),
                m if m.is_aipw() => {
                    let (spec_cov, spec_sel) = m.working_specs().expect("aipw specs");
                    aipw_bootstrap_se(&sim.records, &spec_sel, &spec_cov, config.aipw_bootstrap, method_seed, &config.aipw)
                        .ok()
                        .filter(|r| !r.diverged)
                        .map(|r| Outcome::wald(r.beta, r.se))
                }
                m => {
                    let (spec_x, spec_miss) = m.working_specs().expect("nnmi specs");
                    let cfg = ImputationConfig { seed: method_seed, spec_x, spec_miss, ..config.imputation.clone() };
                    nnmi_estimate(&sim.records, &cfg, &cox).ok().map(|r| Outcome {
                        se: r.pooled.se(),
                        estimate: r.pooled.beta,
                        ci_lower: r.pooled.ci_lower,
                        ci_upper: r.pooled.ci_upper,
                    })
                }
            }
        })
        .collect();
    ReplicateResult { outcomes, censoring_rate: sim.censoring_rate(), missing_rate: sim.missing_rate() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefSummary {
    pub name: String,
    pub truth: f64,
    pub est_mean: f64,
    /// Absent with fewer than two usable replicates.
    pub sd_empirical: Option<f64>,
    pub se_mean: f64,
    /// Percent of intervals covering the truth.
    pub coverage_rate: f64,
    pub bias: f64,
    pub mse: f64,
    pub n_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub coefficients: Vec<CoefSummary>,
    /// Replicates where AIPW failed to converge; only reported for AIPW.
    pub divergence_count: Option<usize>,
    /// Replicates where any other method failed.
    pub failure_count: usize,
}

impl MethodSummary {
    pub fn coef(&self, name: &str) -> &CoefSummary {
        self.coefficients.iter().find(|c| c.name == name).expect("coefficient name")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub scenario: Scenario,
    pub replicates: usize,
    pub master_seed: u64,
    pub aipw_bootstrap: usize,
    pub nn: usize,
    pub w1: f64,
    pub w2: f64,
    pub m: usize,
    pub methods: Vec<MethodSummary>,
    pub censoring_rate: f64,
    pub missing_rate: f64,
    pub warnings: Vec<String>,
}

impl MonteCarloSummary {
    pub fn method(&self, m: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|s| s.method == m)
    }

    /// Wide table: one row per method, Est/SD/SE/CR per coefficient, then Div.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,est_x,sd_x,se_x,cr_x,est_z,sd_z,se_z,cr_z,div,failures\n");
        let opt = |v: Option<f64>| v.map(fmt_sig).unwrap_or_default();
        for m in &self.methods {
            let mut cells = vec![m.method.to_string()];
            for c in &m.coefficients {
                cells.push(fmt_sig(c.est_mean));
                cells.push(opt(c.sd_empirical));
                cells.push(fmt_sig(c.se_mean));
                cells.push(fmt_sig(c.coverage_rate));
            }
            cells.push(m.divergence_count.map(|d| d.to_string()).unwrap_or_default());
            cells.push(m.failure_count.to_string());
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

pub fn summarize(scenario: &Scenario, config: &MonteCarloConfig, results: &[ReplicateResult]) -> MonteCarloSummary {
    let truths = [("beta_x", scenario.beta_x), ("beta_z", scenario.beta_z)];
    let methods = config
        .methods
        .iter()
        .enumerate()
        .map(|(mi, &method)| {
            let used: Vec<&Outcome> = results.iter().filter_map(|r| r.outcomes[mi].as_ref()).collect();
            let failures = results.len() - used.len();
            let coefficients = truths
                .iter()
                .enumerate()
                .map(|(k, &(name, truth))| {
                    let n = used.len() as f64;
                    let est: Vec<f64> = used.iter().map(|o| o.estimate[k]).collect();
                    let mean = est.iter().sum::<f64>() / n;
                    let sd = (used.len() >= 2).then(|| (est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
                    let covered = used.iter().filter(|o| o.ci_lower[k] <= truth && truth <= o.ci_upper[k]).count();
                    CoefSummary {
                        name: name.to_string(),
                        truth,
                        est_mean: mean,
                        sd_empirical: sd,
                        se_mean: used.iter().map(|o| o.se[k]).sum::<f64>() / n,
                        coverage_rate: 100.0 * covered as f64 / n,
                        bias: mean - truth,
                        mse: est.iter().map(|e| (e - truth).powi(2)).sum::<f64>() / n,
                        n_used: used.len(),
                    }
                })
                .collect();
            MethodSummary {
                method,
                coefficients,
                divergence_count: method.is_aipw().then_some(failures),
                failure_count: if method.is_aipw() { 0 } else { failures },
            }
        })
        .collect();
    let r = results.len() as f64;
    let mut warnings = Vec::new();
    if config.replicates < 500 {
        warnings.push(format!("{} replicates (desk-scale run; reference design uses 500)", config.replicates));
    }
    if config.aipw_bootstrap < 500 && config.methods.iter().any(|m| m.is_aipw()) {
        warnings.push(format!("{} AIPW bootstrap resamples (reference design uses 500)", config.aipw_bootstrap));
    }
    MonteCarloSummary {
        scenario: scenario.clone(),
        replicates: config.replicates,
        master_seed: config.master_seed,
        aipw_bootstrap: config.aipw_bootstrap,
        nn: config.imputation.nn,
        w1: config.imputation.w1,
        w2: config.imputation.w2,
        m: config.imputation.m,
        methods,
        censoring_rate: results.iter().map(|x| x.censoring_rate).sum::<f64>() / r,
        missing_rate: results.iter().map(|x| x.missing_rate).sum::<f64>() / r,
        warnings,
    }
}

/// Run all replicates (in parallel) and summarize. Replicate `k` uses
/// streams derived from `(master_seed, k)`, so the summary is independent of
/// scheduling.
pub fn run_monte_carlo(scenario: &Scenario, config: &MonteCarloConfig) -> MonteCarloSummary {
    use std::sync::atomic::{AtomicUsize, Ordering};
    let done = AtomicUsize::new(0);
    let results: Vec<ReplicateResult> = (0..config.replicates)
        .into_par_iter()
        .map(|rep| {
            let r = run_replicate(scenario, config, rep);
            let k = done.fetch_add(1, Ordering::Relaxed) + 1;
            if config.progress && (k.is_multiple_of(25) || k == config.replicates) {
                eprintln!("[{}] {k}/{} replicates", scenario.label, config.replicates);
            }
            r
        })
        .collect();
    summarize(scenario, config, &results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_parameters() {
        let s = Scenario::table4(400);
        assert_eq!(s.beta_x, 2f64.ln());
        assert_eq!(s.beta_z, -(2f64.ln()));
        assert_eq!((s.theta_x, s.theta_z), (-2.0, 0.1));
        assert_eq!(Scenario::table5(200).x_law, CovariateLaw::Logit { a0: 0.25, a1: -0.5 });
        assert!(Scenario { n: 10, ..s }.validate().is_err());
    }

    #[test]
    fn builtin_list_roundtrips() {
        let all = builtin_scenarios();
        assert_eq!(all.len(), 8);
        assert!(all.iter().any(|s| s.label == "table4-n400"));
        assert!(all.iter().any(|s| matches!(s.miss_law, SelectionLaw::Cloglog { .. })));
        for s in &all {
            assert_eq!(&Scenario::from_json(&s.to_json()).unwrap(), s);
            assert!(s.validate().is_ok());
        }
    }

    #[test]
    fn cloglog_x_law_keeps_mean() {
        let s = Scenario::table5(400);
        let target = s.x_law.mean_prob();
        let c = s.with_x_link(LawLink::Cloglog);
        assert!(matches!(c.x_law, CovariateLaw::Cloglog { a1, .. } if a1 == -0.5));
        assert!((c.x_law.mean_prob() - target).abs() < 1e-10);
        let t4 = Scenario::table4(200).with_x_link(LawLink::Cloglog);
        assert!((t4.x_law.prob(0.3) - 0.5).abs() < 1e-10);
    }

    #[test]
    fn method_names_parse() {
        for m in Method::ALL {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert_eq!("aipw_11".parse::<Method>().unwrap(), Method::Aipw11);
        assert!("xyz".parse::<Method>().is_err());
    }

    #[test]
    fn strongly_negative_censoring_rates_match_quadrature() {
        // Z ~ U(0,1) with no intercept: exp(-20 z) is not negligible near z = 0,
        // so a small censored fraction remains.
        let s = Scenario { theta_x: -20.0, theta_z: -20.0, ..Scenario::table4(20_000) };
        let d = generate_dataset(&s, &mut rng::stream(3, &[]));
        let k = 20_000;
        let mut expected = 0.0;
        for i in 0..k {
            let z = (i as f64 + 0.5) / k as f64;
            for x in [0.0, 1.0] {
                let t = (s.beta_x * x + s.beta_z * z).exp();
                let c = (s.theta_x * x + s.theta_z * z).exp();
                expected += 0.5 * c / (c + t) / k as f64;
            }
        }
        let se = (expected * (1.0 - expected) / s.n as f64).sqrt();
        assert!(expected < 0.03);
        assert!((d.censoring_rate() - expected).abs() < 4.0 * se);
    }

    #[test]
    fn constant_x_law_mean() {
        let s = Scenario::table4(20_000);
        let d = generate_dataset(&s, &mut rng::stream(4, &[]));
        let mean = d.full_x.iter().sum::<f64>() / d.full_x.len() as f64;
        let se = (0.25 / d.full_x.len() as f64).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * se);
        // erased x agrees with the full value where observed
        assert!(d.records.iter().zip(&d.full_x).all(|(r, &x)| r.x.is_none_or(|v| v == x)));
    }
}
