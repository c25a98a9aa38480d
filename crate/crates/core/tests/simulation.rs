use coxmi::nnmi::ImputationConfig;
use coxmi::rng;
use coxmi::simulation::{
    builtin_scenarios, draw_subject, generate_dataset, run_monte_carlo, CovariateLaw, LatentSubject, Method,
    MonteCarloConfig, Scenario,
};

fn latent(s: &Scenario, n: usize, seed: u64) -> Vec<LatentSubject> {
    let mut r = rng::stream(seed, &[]);
    (0..n).map(|_| draw_subject(s, &mut r)).collect()
}

fn small_config(replicates: usize, seed: u64, methods: Vec<Method>) -> MonteCarloConfig {
    MonteCarloConfig {
        replicates,
        master_seed: seed,
        methods,
        aipw_bootstrap: 5,
        imputation: ImputationConfig { m: 3, ..ImputationConfig::default() },
        ..MonteCarloConfig::default()
    }
}

#[test]
fn large_sample_rates_match_design() {
    let d = generate_dataset(&Scenario::table4(100_000), &mut rng::stream(41, &[]));
    assert!((d.censoring_rate() - 0.35).abs() < 0.01, "censoring {}", d.censoring_rate());
    assert!((d.missing_rate() - 0.63).abs() < 0.01, "missing {}", d.missing_rate());
}

#[test]
fn failure_times_are_exponential_within_a_stratum() {
    let s = Scenario::table4(1000);
    let z0 = 0.5;
    for x in [0.0, 1.0] {
        let t: Vec<f64> = latent(&s, 1_000_000, 42)
            .into_iter()
            .filter(|u| u.x == x && (u.z - z0).abs() <= 0.01)
            .map(|u| u.failure)
            .collect();
        let rate = t.len() as f64 / t.iter().sum::<f64>();
        let want = (s.beta_x * x + s.beta_z * z0).exp();
        assert!((rate / want - 1.0).abs() < 0.05, "x = {x}: rate {rate} vs {want} from {} draws", t.len());
    }
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    for (rank, &i) in idx.iter().enumerate() {
        r[i] = rank as f64;
    }
    r
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn failure_and_censoring_are_conditionally_independent() {
    let s = Scenario::table4(1000);
    let subjects = latent(&s, 50_000, 43);
    let bins = 20;
    let (mut weighted, mut total) = (0.0, 0.0);
    for x in [0.0, 1.0] {
        for b in 0..bins {
            let (t, c): (Vec<f64>, Vec<f64>) = subjects
                .iter()
                .filter(|u| u.x == x && ((u.z * bins as f64) as usize).min(bins - 1) == b)
                .map(|u| (u.failure, u.censoring))
                .unzip();
            let w = t.len() as f64;
            weighted += w * correlation(&ranks(&t), &ranks(&c));
            total += w;
        }
    }
    let rho = weighted / total;
    // Null SE of the pooled Spearman coefficient is about 1 / sqrt(n) = 0.0045.
    assert!(rho.abs() < 0.02, "pooled within-stratum rank correlation {rho}");
}

#[test]
fn constant_covariate_law_has_the_right_mean() {
    let s = Scenario::table4(20_000);
    assert_eq!(s.x_law, CovariateLaw::Constant { p: 0.5 });
    let d = generate_dataset(&s, &mut rng::stream(44, &[]));
    let mean = d.full_x.iter().sum::<f64>() / d.full_x.len() as f64;
    let se = (0.25 / d.full_x.len() as f64).sqrt();
    assert!((mean - 0.5).abs() < 3.0 * se, "{mean}");
}

#[test]
fn records_follow_the_latent_draws() {
    let s = Scenario::table5(500);
    for u in latent(&s, 500, 45) {
        let r = u.record();
        assert_eq!(r.time, u.failure.min(u.censoring));
        assert_eq!(r.event, u.failure <= u.censoring);
        assert_eq!(r.x.is_some(), u.observed);
        assert!(r.x.is_none_or(|x| x == u.x));
        assert!(u.x == 0.0 || u.x == 1.0);
        assert!((0.0..1.0).contains(&u.z));
    }
}

#[test]
fn single_replicate_has_no_sd_and_reports_its_estimate() {
    let s = Scenario::table4(200);
    let cfg = small_config(1, 7, vec![Method::Fo, Method::Cc]);
    let summary = run_monte_carlo(&s, &cfg);
    let d = generate_dataset(&s, &mut rng::stream(7, &[0, 0]));
    let fit = coxmi::survival::fit_cox(&d.fully_observed(), None, None, &Default::default()).unwrap();
    let fo = summary.method(Method::Fo).unwrap();
    for (k, name) in ["beta_x", "beta_z"].iter().enumerate() {
        let c = fo.coef(name);
        assert_eq!(c.sd_empirical, None);
        assert_eq!(c.est_mean, fit.beta[k]);
    }
}

#[test]
fn equal_seeds_give_identical_summaries() {
    let s = Scenario::table4(200);
    let a = run_monte_carlo(&s, &small_config(3, 9, Method::ALL.to_vec()));
    let b = run_monte_carlo(&s, &small_config(3, 9, Method::ALL.to_vec()));
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(a.to_csv(), b.to_csv());
    let c = run_monte_carlo(&s, &small_config(3, 10, Method::ALL.to_vec()));
    assert_ne!(a.to_csv(), c.to_csv());
}

#[test]
fn summary_metrics_stay_in_range() {
    let s = Scenario::table5(200);
    let reps = 6;
    let summary = run_monte_carlo(&s, &small_config(reps, 11, Method::ALL.to_vec()));
    assert_eq!(summary.methods.len(), 8);
    for m in &summary.methods {
        for c in &m.coefficients {
            assert!((0.0..=100.0).contains(&c.coverage_rate), "{m:?}");
            assert!(c.n_used <= reps);
        }
        assert!(m.divergence_count.unwrap_or(0) <= reps);
        assert!(m.failure_count <= reps);
        assert_eq!(m.divergence_count.is_some(), m.method.is_aipw());
    }
    assert!(summary.censoring_rate > 0.0 && summary.censoring_rate < 1.0);
    assert!(summary.missing_rate > 0.0 && summary.missing_rate < 1.0);
}

#[test]
fn full_data_coverage_is_nominal_for_every_builtin_scenario() {
    for s in builtin_scenarios() {
        let summary = run_monte_carlo(&s, &small_config(500, 12, vec![Method::Fo]));
        let fo = summary.method(Method::Fo).unwrap();
        for c in &fo.coefficients {
            assert!((92.0..=98.0).contains(&c.coverage_rate), "{} {}: {}", s.label, c.name, c.coverage_rate);
        }
    }
}

#[test]
fn builtin_scenarios_cover_both_designs_and_round_trip() {
    let all = builtin_scenarios();
    let ln2 = 2f64.ln();
    assert!(all.iter().any(|s| s.beta_x == ln2 && s.beta_z == -ln2 && s.theta_x == -2.0 && s.theta_z == 0.1
        && s.x_law == CovariateLaw::Constant { p: 0.5 }));
    assert!(all.iter().any(|s| s.x_law == CovariateLaw::Logit { a0: 0.25, a1: -0.5 }));
    for s in &all {
        assert!(s.validate().is_ok());
        let back = Scenario::from_json(&s.to_json()).unwrap();
        assert_eq!(&back, s);
        assert_eq!(back.to_json(), s.to_json());
    }
}
