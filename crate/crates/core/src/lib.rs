//! Cox proportional-hazards regression with one covariate missing at random.
//!
//! Three estimators are provided:
//!
//! * complete-case analysis ([`cc`]),
//! * augmented inverse-probability weighting with parametric working models
//!   and bootstrap standard errors ([`aipw`]),
//! * nonparametric nearest-neighbour multiple imputation driven by two
//!   working-model predictive scores, pooled with Rubin's rules ([`nnmi`]).
//!
//! [`simulation`] contains the generative model and Monte Carlo harness used
//! to compare them, and [`io`] / [`analysis`] the CSV-driven analysis path.

pub mod aipw;
pub mod analysis;
pub mod cc;
pub mod features;
pub mod glm;
pub mod inference;
pub mod io;
pub mod nnmi;
pub mod pooling;
pub mod rng;
pub mod simulation;
pub mod survival;

pub use nalgebra;

pub use aipw::{aipw_bootstrap_se, aipw_solve, fit_working_models, AipwResult, AipwWorkingModels};
pub use cc::fit_complete_case;
pub use features::{PreparedData, Term, WorkingSpec};
pub use glm::{fit_glm, GlmFit, Link};
pub use io::{load_csv, write_results, DatasetSchema, LoadedData, MethodResult, OutputFormat};
pub use nnmi::{impute_once, nnmi_estimate, ImputationConfig, ScorePair};
pub use pooling::{rubin_pool, PooledEstimate};
pub use simulation::{generate_dataset, run_monte_carlo, Method, MonteCarloConfig, MonteCarloSummary, Scenario};
pub use survival::{fit_cox, nelson_aalen, CoxFit, CoxOptions, StepFunction, SurvivalRecord};
