//! CSV ingestion of survival datasets and serialization of estimates.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference;
use crate::pooling::PooledEstimate;
use crate::survival::SurvivalRecord;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o error on {path}: {error}")]
    Io { path: String, error: std::io::Error },
    #[error("csv error: {0}")]
    Csv(csv::Error),
    #[error("json error: {0}")]
    Json(serde_json::Error),
    #[error("row {row}, column '{column}': cannot parse '{value}'")]
    Parse { row: usize, column: String, value: String },
    #[error("row {row}: negative time {value}")]
    NegativeTime { row: usize, value: f64 },
    #[error("column '{column}': reference level '{level}' does not occur")]
    UnknownLevel { column: String, level: String },
    #[error("schema: {0}")]
    Schema(String),
}

impl From<csv::Error> for IoError {
    fn from(e: csv::Error) -> Self {
        IoError::Csv(e)
    }
}

impl From<serde_json::Error> for IoError {
    fn from(e: serde_json::Error) -> Self {
        IoError::Json(e)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |error| IoError::Io { path: path.display().to_string(), error }
}

/// Column roles of an input file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub time_column: String,
    pub status_column: String,
    pub missing_covariate_column: String,
    pub covariate_columns: Vec<String>,
    /// Categorical column -> reference level; other levels become indicators.
    #[serde(default)]
    pub categorical_encodings: BTreeMap<String, String>,
    /// Extra token (besides the empty cell) that marks a missing value.
    #[serde(default)]
    pub missing_token: Option<String>,
}

impl DatasetSchema {
    fn roles(&self) -> Vec<&str> {
        let mut v = vec![self.time_column.as_str(), self.status_column.as_str(), self.missing_covariate_column.as_str()];
        v.extend(self.covariate_columns.iter().map(String::as_str));
        v
    }

    pub fn validate(&self, headers: &[String]) -> Result<(), IoError> {
        let roles = self.roles();
        let mut seen = BTreeSet::new();
        for r in &roles {
            if !seen.insert(*r) {
                return Err(IoError::Schema(format!("column '{r}' is named more than once")));
            }
            if !headers.iter().any(|h| h == r) {
                return Err(IoError::Schema(format!("column '{r}' not found in header")));
            }
        }
        for c in self.categorical_encodings.keys() {
            if !roles[2..].contains(&c.as_str()) {
                return Err(IoError::Schema(format!("categorical column '{c}' is not a covariate")));
            }
        }
        Ok(())
    }
}

/// The file as read, kept for writing completed copies.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedData {
    pub records: Vec<SurvivalRecord>,
    /// Name of the possibly-missing covariate (after encoding).
    pub x_name: String,
    /// Names of the fully observed covariates, indicators expanded.
    pub z_names: Vec<String>,
    pub raw: RawTable,
    /// Column index of the missing covariate in `raw`.
    pub x_column: usize,
}

impl LoadedData {
    pub fn covariate_names(&self) -> Vec<String> {
        std::iter::once(self.x_name.clone()).chain(self.z_names.iter().cloned()).collect()
    }
}

enum Encoding {
    Numeric,
    /// Non-reference levels, each an indicator.
    Levels(Vec<String>),
}

fn is_missing(cell: &str, schema: &DatasetSchema) -> bool {
    cell.is_empty() || schema.missing_token.as_deref() == Some(cell)
}

pub fn load_csv(path: impl AsRef<Path>, schema: &DatasetSchema) -> Result<LoadedData, IoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_csv(&text, schema)
}

pub fn parse_csv(text: &str, schema: &DatasetSchema) -> Result<LoadedData, IoError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    schema.validate(&headers)?;
    let mut rows = Vec::new();
    for rec in reader.records() {
        rows.push(rec?.iter().map(str::to_string).collect::<Vec<_>>());
    }
    let col = |name: &str| headers.iter().position(|h| h == name).expect("validated");
    let (ti, si, xi) = (col(&schema.time_column), col(&schema.status_column), col(&schema.missing_covariate_column));

    let encoding = |name: &str| -> Result<Encoding, IoError> {
        let Some(reference) = schema.categorical_encodings.get(name) else {
            return Ok(Encoding::Numeric);
        };
        let c = col(name);
        let levels: BTreeSet<&str> = rows.iter().map(|r| r[c].as_str()).filter(|v| !is_missing(v, schema)).collect();
        if !levels.contains(reference.as_str()) {
            return Err(IoError::UnknownLevel { column: name.to_string(), level: reference.clone() });
        }
        Ok(Encoding::Levels(levels.into_iter().filter(|l| l != reference).map(str::to_string).collect()))
    };

    let x_enc = encoding(&schema.missing_covariate_column)?;
    let x_name = match &x_enc {
        Encoding::Numeric => schema.missing_covariate_column.clone(),
        Encoding::Levels(levels) if levels.len() <= 1 => match levels.first() {
            Some(l) => format!("{}_{}", schema.missing_covariate_column, l),
            None => schema.missing_covariate_column.clone(),
        },
        Encoding::Levels(levels) => {
            return Err(IoError::Schema(format!(
                "missing covariate '{}' must have at most two levels, found {}",
                schema.missing_covariate_column,
                levels.len() + 1
            )))
        }
    };
    let mut z_cols = Vec::new();
    let mut z_names = Vec::new();
    for name in &schema.covariate_columns {
        let enc = encoding(name)?;
        match &enc {
            Encoding::Numeric => z_names.push(name.clone()),
            Encoding::Levels(levels) => z_names.extend(levels.iter().map(|l| format!("{name}_{l}"))),
        }
        z_cols.push((col(name), name.clone(), enc));
    }

    let parse_num = |row: usize, column: &str, value: &str| -> Result<f64, IoError> {
        value
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| IoError::Parse { row, column: column.to_string(), value: value.to_string() })
    };
    let mut records = Vec::with_capacity(rows.len());
    for (r, cells) in rows.iter().enumerate() {
        let row = r + 1;
        let time = parse_num(row, &schema.time_column, &cells[ti])?;
        if time < 0.0 {
            return Err(IoError::NegativeTime { row, value: time });
        }
        let event = match cells[si].as_str() {
            "1" => true,
            "0" => false,
            other => return Err(IoError::Parse { row, column: schema.status_column.clone(), value: other.to_string() }),
        };
        let x_cell = cells[xi].as_str();
        let x = if is_missing(x_cell, schema) {
            None
        } else {
            Some(match &x_enc {
                Encoding::Numeric => parse_num(row, &schema.missing_covariate_column, x_cell)?,
                Encoding::Levels(levels) => f64::from(u8::from(levels.first().is_some_and(|l| l == x_cell))),
            })
        };
        let mut z = Vec::with_capacity(z_names.len());
        for (c, name, enc) in &z_cols {
            let cell = cells[*c].as_str();
            if is_missing(cell, schema) {
                return Err(IoError::Parse { row, column: name.clone(), value: cell.to_string() });
            }
            match enc {
                Encoding::Numeric => z.push(parse_num(row, name, cell)?),
                Encoding::Levels(levels) => z.extend(levels.iter().map(|l| if l == cell { 1.0 } else { 0.0 })),
            }
        }
        records.push(SurvivalRecord { time, event, z, x });
    }
    Ok(LoadedData { records, x_name, z_names, raw: RawTable { headers, rows }, x_column: xi })
}

/// Write records with numeric columns `time,status,<x>,<z...>`; missing `x` is an empty cell.
pub fn write_records_csv(path: impl AsRef<Path>, records: &[SurvivalRecord], x_name: &str, z_names: &[String]) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["time".to_string(), "status".to_string(), x_name.to_string()];
    header.extend(z_names.iter().cloned());
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![r.time.to_string(), u8::from(r.event).to_string(), r.x.map(|v| v.to_string()).unwrap_or_default()];
        row.extend(r.z.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| IoError::Schema(e.to_string()))?;
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn write_raw_csv(path: impl AsRef<Path>, table: &RawTable) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&table.headers)?;
    for r in &table.rows {
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| IoError::Schema(e.to_string()))?;
    fs::write(path, bytes).map_err(io_err(path))
}

/// Six significant digits, shortest form.
pub fn fmt_sig(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let rounded: f64 = format!("{x:.5e}").parse().expect("formatted float parses");
    rounded.to_string()
}

/// Serialize `Vec<f64>` with infinities as `null` (and back).
pub mod serde_inf_vec {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|x| x.is_finite().then_some(*x)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let v: Vec<Option<f64>> = Vec::deserialize(d)?;
        Ok(v.into_iter().map(|x| x.unwrap_or(f64::INFINITY)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateEstimate {
    pub name: String,
    pub beta: f64,
    pub se: f64,
    pub hazard_ratio: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub p_value: f64,
    /// Reference-distribution degrees of freedom; `None` means normal.
    pub df: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub covariates: Vec<CovariateEstimate>,
}

impl MethodResult {
    /// Normal-theory Wald summaries.
    pub fn from_wald(method: &str, names: &[String], beta: &[f64], se: &[f64]) -> Self {
        let covariates = names
            .iter()
            .zip(beta)
            .zip(se)
            .map(|((name, &b), &s)| {
                let (lo, hi) = inference::interval(b, s, f64::INFINITY);
                CovariateEstimate {
                    name: name.clone(),
                    beta: b,
                    se: s,
                    hazard_ratio: b.exp(),
                    ci_lower: lo.exp(),
                    ci_upper: hi.exp(),
                    p_value: inference::two_sided_p(b, s, f64::INFINITY),
                    df: None,
                }
            })
            .collect();
        Self { method: method.to_string(), covariates }
    }

    /// Rubin-pooled summaries with t reference distributions.
    pub fn from_pooled(method: &str, names: &[String], pooled: &PooledEstimate) -> Self {
        let p = pooled.p_values();
        let covariates = names
            .iter()
            .enumerate()
            .map(|(k, name)| CovariateEstimate {
                name: name.clone(),
                beta: pooled.beta[k],
                se: pooled.variance[k].sqrt(),
                hazard_ratio: pooled.beta[k].exp(),
                ci_lower: pooled.ci_lower[k].exp(),
                ci_upper: pooled.ci_upper[k].exp(),
                p_value: p[k],
                df: pooled.df[k].is_finite().then_some(pooled.df[k]),
            })
            .collect();
        Self { method: method.to_string(), covariates }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

impl std::str::FromStr for OutputFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(format!("unknown format '{other}' (csv, json)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsDocument {
    pub metadata: serde_json::Value,
    pub results: Vec<MethodResult>,
}

pub const RESULTS_CSV_HEADER: &str = "method,covariate,hr,ci_lower,ci_upper,p_value,beta,se";

pub fn results_to_csv(results: &[MethodResult]) -> String {
    let mut out = format!("{RESULTS_CSV_HEADER}\n");
    for m in results {
        for c in &m.covariates {
            let cells = [
                m.method.clone(),
                c.name.clone(),
                fmt_sig(c.hazard_ratio),
                fmt_sig(c.ci_lower),
                fmt_sig(c.ci_upper),
                fmt_sig(c.p_value),
                fmt_sig(c.beta),
                fmt_sig(c.se),
            ];
            out.push_str(&cells.join(","));
            out.push('\n');
        }
    }
    out
}

/// CSV: one row per (method, covariate) with HR, 95% CI and p. JSON: full
/// precision plus `metadata`.
pub fn write_results(
    results: &[MethodResult],
    metadata: &serde_json::Value,
    format: OutputFormat,
    path: impl AsRef<Path>,
) -> Result<(), IoError> {
    let path = path.as_ref();
    let body = match format {
        OutputFormat::Csv => results_to_csv(results),
        OutputFormat::Json => {
            let doc = ResultsDocument { metadata: metadata.clone(), results: results.to_vec() };
            serde_json::to_string_pretty(&doc)? + "\n"
        }
    };
    fs::write(path, body).map_err(io_err(path))
}

pub fn read_results_json(path: impl AsRef<Path>) -> Result<ResultsDocument, IoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> DatasetSchema {
        DatasetSchema {
            time_column: "time".into(),
            status_column: "status".into(),
            missing_covariate_column: "her2".into(),
            covariate_columns: vec!["age".into(), "race".into()],
            categorical_encodings: BTreeMap::from([("race".to_string(), "White".to_string())]),
            missing_token: Some("NA".into()),
        }
    }

    #[test]
    fn empty_cell_marks_missing() {
        let text = "time,status,her2,age,race\n1.5,1,1,60,White\n2.0,0,,55,Black\n3.1,1,0,70,Other\n";
        let d = parse_csv(text, &schema()).unwrap();
        assert_eq!(d.records.iter().filter(|r| !r.is_observed()).count(), 1);
        assert!(d.records[1].x.is_none());
        assert_eq!(d.z_names, vec!["age", "race_Black", "race_Other"]);
        assert_eq!(d.records[0].z, vec![60.0, 0.0, 0.0]);
        assert_eq!(d.records[1].z, vec![55.0, 1.0, 0.0]);
        assert_eq!(d.records[2].z, vec![70.0, 0.0, 1.0]);
    }

    #[test]
    fn sentinel_token_marks_missing() {
        let text = "time,status,her2,age,race\n1.5,1,NA,60,White\n";
        let d = parse_csv(text, &schema()).unwrap();
        assert!(d.records[0].x.is_none());
    }

    #[test]
    fn bad_status_names_the_row() {
        let text = "time,status,her2,age,race\n1.5,1,1,60,White\n2.0,2,0,55,Black\n";
        match parse_csv(text, &schema()) {
            Err(IoError::Parse { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "status");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn negative_time_and_unknown_reference() {
        let text = "time,status,her2,age,race\n-1,1,1,60,White\n";
        assert!(matches!(parse_csv(text, &schema()), Err(IoError::NegativeTime { row: 1, .. })));
        let text = "time,status,her2,age,race\n1,1,1,60,Black\n";
        assert!(matches!(parse_csv(text, &schema()), Err(IoError::UnknownLevel { .. })));
        let text = "time,status,her2,age\n1,1,1,60\n";
        assert!(matches!(parse_csv(text, &schema()), Err(IoError::Schema(_))));
    }

    #[test]
    fn categorical_missing_covariate() {
        let mut s = schema();
        s.categorical_encodings.insert("her2".into(), "Negative".into());
        let text = "time,status,her2,age,race\n1,1,Positive,60,White\n2,0,Negative,50,White\n3,1,,40,White\n";
        let d = parse_csv(text, &s).unwrap();
        assert_eq!(d.x_name, "her2_Positive");
        assert_eq!(d.records.iter().map(|r| r.x).collect::<Vec<_>>(), vec![Some(1.0), Some(0.0), None]);
    }

    #[test]
    fn sig_digits() {
        assert_eq!(fmt_sig(1.0), "1");
        assert_eq!(fmt_sig(1.23456789), "1.23457");
        assert_eq!(fmt_sig(-0.000123456789), "-0.000123457");
        assert_eq!(fmt_sig(123456789.0), "123457000");
    }

    #[test]
    fn wald_summary_at_zero() {
        let r = MethodResult::from_wald("CC", &["x".into()], &[0.0], &[1.0]);
        let c = &r.covariates[0];
        assert_eq!(c.hazard_ratio, 1.0);
        assert!((c.ci_lower - (-1.959963984540054f64).exp()).abs() < 1e-9);
        assert!((c.ci_upper - 1.959963984540054f64.exp()).abs() < 1e-9);
        assert!((c.p_value - 1.0).abs() < 1e-12);
    }
}
