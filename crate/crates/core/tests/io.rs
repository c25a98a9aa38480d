use std::collections::BTreeMap;

use coxmi::io::{parse_csv, read_results_json, results_to_csv, write_raw_csv, write_results, IoError, MethodResult, OutputFormat};
use coxmi::pooling::rubin_pool;
use coxmi::{load_csv, DatasetSchema};
use proptest::prelude::*;

fn schema() -> DatasetSchema {
    DatasetSchema {
        time_column: "time".into(),
        status_column: "status".into(),
        missing_covariate_column: "her2".into(),
        covariate_columns: vec!["age".into(), "race".into(), "surgery".into()],
        categorical_encodings: BTreeMap::from([("race".into(), "White".into()), ("surgery".into(), "None".into())]),
        missing_token: None,
    }
}

const FIXTURE: &str = "time,status,her2,age,race,surgery\n\
1.5,1,1,61.2,White,None\n\
2.25,0,,55,Black,Partial\n\
3.1,1,0,70,Other,Full\n\
0.4,1,1,48.5,Black,None\n\
7,0,,66,White,Full\n";

#[test]
fn three_rows_with_one_empty_cell() {
    let text = "time,status,her2,age,race,surgery\n1,1,1,60,White,None\n2,0,,50,Black,Full\n3,1,0,40,White,Full\n";
    let d = parse_csv(text, &schema()).unwrap();
    assert_eq!(d.records.len(), 3);
    let missing: Vec<usize> = (0..3).filter(|&i| d.records[i].x.is_none()).collect();
    assert_eq!(missing, vec![1]);
}

#[test]
fn three_level_factor_gives_two_indicators() {
    let d = parse_csv(FIXTURE, &schema()).unwrap();
    let race: Vec<&String> = d.z_names.iter().filter(|n| n.starts_with("race_")).collect();
    assert_eq!(race, ["race_Black", "race_Other"]);
}

#[test]
fn indicators_sum_to_at_most_one() {
    let d = parse_csv(FIXTURE, &schema()).unwrap();
    for prefix in ["race_", "surgery_"] {
        let cols: Vec<usize> = d.z_names.iter().enumerate().filter(|(_, n)| n.starts_with(prefix)).map(|(i, _)| i).collect();
        assert_eq!(cols.len(), 2);
        for r in &d.records {
            let s: f64 = cols.iter().map(|&c| r.z[c]).sum();
            assert!(s == 0.0 || s == 1.0, "{prefix}: {:?}", r.z);
        }
    }
}

#[test]
fn status_outside_zero_one_is_rejected_with_its_row() {
    let text = "time,status,her2,age,race,surgery\n1,1,1,60,White,None\n2,1,0,50,Black,Full\n3,2,0,40,White,Full\n";
    match parse_csv(text, &schema()) {
        Err(e @ IoError::Parse { row: 3, .. }) => assert!(e.to_string().contains("row 3"), "{e}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn load_write_load_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    std::fs::write(&a, FIXTURE).unwrap();
    let first = load_csv(&a, &schema()).unwrap();
    write_raw_csv(&b, &first.raw).unwrap();
    let second = load_csv(&b, &schema()).unwrap();
    assert_eq!(first, second);
}

#[test]
fn json_results_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    let names = vec!["her2".to_string(), "age".to_string()];
    let cc = MethodResult::from_wald("CC", &names, &[std::f64::consts::LN_2 / 7.0, -1.0e-17], &[0.3, 2.0_f64.sqrt()]);
    let pooled = rubin_pool(&[vec![0.3, 0.01], vec![0.35, 0.02], vec![0.28, 0.015]], &vec![vec![0.04, 1e-4]; 3]).unwrap();
    let nnmi = MethodResult::from_pooled("NNMI", &names, &pooled);
    let meta = serde_json::json!({"seed": 7, "command": "analyze"});
    let results = vec![cc, nnmi];
    write_results(&results, &meta, OutputFormat::Json, &path).unwrap();
    let doc = read_results_json(&path).unwrap();
    assert_eq!(doc.metadata, meta);
    assert_eq!(doc.results, results);
    for (a, b) in doc.results.iter().zip(&results) {
        for (x, y) in a.covariates.iter().zip(&b.covariates) {
            assert_eq!(x.beta.to_bits(), y.beta.to_bits());
        }
    }
}

#[test]
fn zero_estimate_with_unit_se() {
    let r = MethodResult::from_wald("CC", &["x".into()], &[0.0], &[1.0]);
    let c = &r.covariates[0];
    assert_eq!(c.hazard_ratio, 1.0);
    assert!((c.ci_lower - (-1.96f64).exp()).abs() < 1e-4);
    assert!((c.ci_upper - 1.96f64.exp()).abs() < 1e-3);
    assert!((c.p_value - 1.0).abs() < 1e-12);
    let csv = results_to_csv(&[r]);
    assert_eq!(csv.lines().nth(1).unwrap(), "CC,x,1,0.140863,7.09907,1,0,1");
}

/// Unnormalized Student-t density.
fn t_kernel(x: f64, df: f64) -> f64 {
    (1.0 + x * x / df).powf(-(df + 1.0) / 2.0)
}

/// `int_a^inf t_kernel` by Simpson's rule after `x = a + s / (1 - s)`.
fn tail_integral(a: f64, df: f64) -> f64 {
    let k = 200_000;
    let h = 1.0 / k as f64;
    let f = |s: f64| {
        if s >= 1.0 {
            return 0.0;
        }
        let u = 1.0 - s;
        t_kernel(a + s / u, df) / (u * u)
    };
    let sum: f64 = (0..=k)
        .map(|i| {
            let w = if i == 0 || i == k { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            w * f(i as f64 * h)
        })
        .sum();
    sum * h / 3.0
}

#[test]
fn pooled_p_values_use_the_t_reference() {
    let estimates = [vec![0.42], vec![0.61], vec![0.35], vec![0.55]];
    let variances = [vec![0.02], vec![0.025], vec![0.018], vec![0.022]];
    let pooled = rubin_pool(&estimates, &variances).unwrap();
    let df = pooled.df[0];
    assert!(df.is_finite() && df > 2.0, "df {df}");
    let r = MethodResult::from_pooled("NNMI", &["x".into()], &pooled);
    let c = &r.covariates[0];
    assert_eq!(c.df, Some(df));
    let stat = c.beta / c.se;
    let oracle = tail_integral(stat, df) / tail_integral(0.0, df);
    assert!((c.p_value - oracle).abs() < 1e-7, "{} vs {oracle}", c.p_value);
    let normal = MethodResult::from_wald("x", &["x".into()], &[c.beta], &[c.se]).covariates[0].p_value;
    assert!(c.p_value - normal > 1e-3, "t {} normal {normal}", c.p_value);
}

proptest! {
    #[test]
    fn parsed_times_and_status_match_the_text(
        rows in prop::collection::vec((0.0f64..100.0, any::<bool>(), prop::option::of(0u8..2), -3.0f64..3.0), 1..30),
    ) {
        let mut text = String::from("time,status,her2,age,race,surgery\n");
        for (i, (t, e, x, z)) in rows.iter().enumerate() {
            let race = if i == 0 { "White" } else { ["White", "Black", "Other"][i % 3] };
            let surgery = if i == 0 { "None" } else { "Full" };
            let x = x.map(|v| v.to_string()).unwrap_or_default();
            text.push_str(&format!("{t},{},{x},{z},{race},{surgery}\n", u8::from(*e)));
        }
        let d = parse_csv(&text, &schema()).unwrap();
        for (r, (t, e, x, z)) in d.records.iter().zip(&rows) {
            prop_assert_eq!(r.time, *t);
            prop_assert_eq!(r.event, *e);
            prop_assert_eq!(r.x, x.map(f64::from));
            prop_assert_eq!(r.z[0], *z);
        }
    }
}
