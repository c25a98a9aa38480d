//! Covariate specifications for the two working models.
//!
//! A working model is described by a list of [`Term`]s drawn from the
//! always-observed quantities of each subject: the fully observed covariates,
//! the observed time, the event indicator and the marginal cumulative hazard
//! evaluated at the observed time.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::survival::{nelson_aalen, CoxError, StepFunction, SurvivalRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Term {
    /// Every fully observed covariate.
    AllZ,
    /// A single fully observed covariate by position.
    Z(usize),
    Time,
    Event,
    CumHaz,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkingSpec {
    pub terms: Vec<Term>,
}

impl WorkingSpec {
    pub fn new(terms: Vec<Term>) -> Self {
        Self { terms }
    }

    /// Covariate model with all correct inputs: Z, event indicator, cumulative hazard.
    pub fn covariate_full() -> Self {
        Self::new(vec![Term::AllZ, Term::Event, Term::CumHaz])
    }

    /// Covariate model missing the cumulative hazard.
    pub fn covariate_reduced() -> Self {
        Self::new(vec![Term::AllZ, Term::Event])
    }

    /// Selection model with Z and observed time.
    pub fn selection_full() -> Self {
        Self::new(vec![Term::AllZ, Term::Time])
    }

    /// Selection model on Z only.
    pub fn selection_reduced() -> Self {
        Self::new(vec![Term::AllZ])
    }

    pub fn width(&self, n_z: usize) -> usize {
        self.terms.iter().map(|t| if *t == Term::AllZ { n_z } else { 1 }).sum()
    }

    pub fn push_row(&self, rec: &SurvivalRecord, cumhaz: f64, out: &mut Vec<f64>) {
        for t in &self.terms {
            match *t {
                Term::AllZ => out.extend_from_slice(&rec.z),
                Term::Z(k) => out.push(rec.z[k]),
                Term::Time => out.push(rec.time),
                Term::Event => out.push(if rec.event { 1.0 } else { 0.0 }),
                Term::CumHaz => out.push(cumhaz),
            }
        }
    }

    pub fn row(&self, rec: &SurvivalRecord, cumhaz: f64) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.terms.len() + rec.z.len());
        self.push_row(rec, cumhaz, &mut v);
        v
    }

    /// Parse a comma list of terms: `z`, `time`/`y`, `event`/`status`/`delta_t`,
    /// `cumhaz`/`h0`, or the name of one covariate from `z_names`.
    pub fn parse(s: &str, z_names: &[String]) -> Result<Self, String> {
        let mut terms = Vec::new();
        for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let term = match tok.to_ascii_lowercase().as_str() {
                "z" => Term::AllZ,
                "time" | "y" => Term::Time,
                "event" | "status" | "delta_t" => Term::Event,
                "cumhaz" | "h0" => Term::CumHaz,
                _ => match z_names.iter().position(|n| n == tok) {
                    Some(k) => Term::Z(k),
                    None => return Err(format!("unknown working-model term '{tok}'")),
                },
            };
            terms.push(term);
        }
        if terms.is_empty() {
            return Err("working-model specification is empty".into());
        }
        Ok(Self { terms })
    }
}

impl fmt::Display for WorkingSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self
            .terms
            .iter()
            .map(|t| match t {
                Term::AllZ => "z".to_string(),
                Term::Z(k) => format!("z{k}"),
                Term::Time => "time".to_string(),
                Term::Event => "event".to_string(),
                Term::CumHaz => "cumhaz".to_string(),
            })
            .collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for WorkingSpec {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::parse(s, &[])
    }
}

/// Records paired with the marginal Nelson-Aalen hazard at each observed time.
#[derive(Debug, Clone)]
pub struct PreparedData<'a> {
    pub records: &'a [SurvivalRecord],
    pub cumhaz: Vec<f64>,
    pub hazard: StepFunction,
}

impl<'a> PreparedData<'a> {
    pub fn new(records: &'a [SurvivalRecord]) -> Result<Self, CoxError> {
        let hazard = nelson_aalen(records)?;
        let cumhaz = records.iter().map(|r| hazard.eval(r.time)).collect();
        Ok(Self { records, cumhaz, hazard })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_z(&self) -> usize {
        self.records.first().map_or(0, |r| r.z.len())
    }

    pub fn row(&self, spec: &WorkingSpec, i: usize) -> Vec<f64> {
        spec.row(&self.records[i], self.cumhaz[i])
    }

    /// Design matrix over the given row indices (duplicates allowed).
    pub fn design(&self, spec: &WorkingSpec, rows: &[usize]) -> DMatrix<f64> {
        let width = spec.width(self.n_z());
        let mut buf = Vec::with_capacity(width);
        let mut m = DMatrix::zeros(rows.len(), width);
        for (r, &i) in rows.iter().enumerate() {
            buf.clear();
            spec.push_row(&self.records[i], self.cumhaz[i], &mut buf);
            for (c, v) in buf.iter().enumerate() {
                m[(r, c)] = *v;
            }
        }
        m
    }
}
