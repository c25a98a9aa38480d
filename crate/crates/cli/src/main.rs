mod config;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use coxmi::analysis::{run_analysis, AnalysisConfig, AnalysisMethod};
use coxmi::io::{load_csv, write_raw_csv, write_results, DatasetSchema, OutputFormat};
use coxmi::nnmi::{impute_many, CovariateKind, ImputationConfig};
use coxmi::simulation::{run_monte_carlo, LawLink, Method, MonteCarloConfig, Scenario};
use coxmi::WorkingSpec;

#[derive(Parser)]
#[command(name = "coxmi", version, about = "Cox regression with a covariate missing at random")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit CC, AIPW and NNMI estimators to a CSV dataset.
    Analyze(DataArgs),
    /// Write M nearest-neighbour imputed copies of a CSV dataset.
    Impute(DataArgs),
    /// Run a Monte Carlo study of the estimators.
    Simulate(SimArgs),
}

#[derive(Args, Serialize, Deserialize, Default, Clone)]
#[serde(rename_all = "kebab-case")]
struct SharedArgs {
    /// TOML file with the same keys as the long flags; flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Master seed; drawn at random and echoed when omitted.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path (standard output when omitted, except for `impute`).
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, value_parser = ["csv", "json"])]
    format: Option<String>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Serialize, Deserialize, Default, Clone)]
#[serde(rename_all = "kebab-case")]
struct DataArgs {
    #[command(flatten)]
    #[serde(flatten)]
    shared: SharedArgs,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    time_col: Option<String>,
    #[arg(long)]
    status_col: Option<String>,
    /// Column of the covariate subject to missingness.
    #[arg(long)]
    missing_col: Option<String>,
    /// Fully observed covariate columns (comma separated).
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
    /// `column=reference` for a categorical column; repeatable.
    #[arg(long)]
    categorical: Option<Vec<String>>,
    /// Token that marks a missing cell in addition to the empty string.
    #[arg(long)]
    missing_token: Option<String>,
    /// cc, aipw or nnmi; repeatable (default: all three).
    #[arg(long)]
    method: Option<Vec<String>>,
    #[arg(long)]
    nn: Option<usize>,
    #[arg(long)]
    w1: Option<f64>,
    #[arg(long)]
    w2: Option<f64>,
    #[arg(long)]
    m: Option<usize>,
    /// AIPW bootstrap resamples.
    #[arg(long)]
    boot: Option<usize>,
    /// Covariate working model terms, e.g. `z,event,cumhaz`.
    #[arg(long)]
    x_model: Option<String>,
    /// Missingness working model terms, e.g. `z,time`.
    #[arg(long)]
    miss_model: Option<String>,
    /// auto, binary or continuous.
    #[arg(long)]
    x_kind: Option<String>,
}

#[derive(Args, Serialize, Deserialize, Default, Clone)]
#[serde(rename_all = "kebab-case")]
struct SimArgs {
    #[command(flatten)]
    #[serde(flatten)]
    shared: SharedArgs,
    /// `table4`, `table5`, or a JSON scenario file.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    /// Re-express the covariate law: constant, logit or cloglog.
    #[arg(long)]
    x_link: Option<String>,
    /// Re-express the selection law: logit or cloglog.
    #[arg(long)]
    miss_link: Option<String>,
    /// AIPW bootstrap resamples per replicate.
    #[arg(long)]
    boot: Option<usize>,
    /// Methods to run (comma separated, default all), e.g. `FO,CC,NNMI11`.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long)]
    nn: Option<usize>,
    #[arg(long)]
    w1: Option<f64>,
    #[arg(long)]
    w2: Option<f64>,
    #[arg(long)]
    m: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    let root = Cli::command();
    match command {
        Command::Analyze(a) => {
            let a = config::resolve(root.find_subcommand("analyze").unwrap(), &a.clone(), a.shared.config.as_deref())?;
            analyze(a)
        }
        Command::Impute(a) => {
            let a = config::resolve(root.find_subcommand("impute").unwrap(), &a.clone(), a.shared.config.as_deref())?;
            impute(a)
        }
        Command::Simulate(a) => {
            let a = config::resolve(root.find_subcommand("simulate").unwrap(), &a.clone(), a.shared.config.as_deref())?;
            simulate(a)
        }
    }
}

/// Fill in the seed (echoed to standard error) and size the thread pool.
fn init(shared: &mut SharedArgs) -> Result<u64> {
    let seed = *shared.seed.get_or_insert_with(|| rand::random::<u64>() >> 1);
    eprintln!("seed: {seed}");
    if let Some(w) = shared.workers {
        if w == 0 {
            bail!("--workers must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(w).build_global().context("configuring worker threads")?;
    }
    Ok(seed)
}

/// Seed, version and a hash of the resolved arguments. Worker count and
/// output location are left out since they do not affect results.
fn metadata<T: Serialize>(command: &str, seed: u64, args: &T) -> Result<Value> {
    let mut config = serde_json::to_value(args)?;
    if let Value::Object(m) = &mut config {
        m.retain(|k, v| !v.is_null() && k != "workers" && k != "output");
    }
    Ok(json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "config_hash": config::hash(&config),
        "config": config,
    }))
}

fn format_of(shared: &SharedArgs) -> Result<OutputFormat> {
    shared.format.as_deref().unwrap_or("csv").parse().map_err(anyhow::Error::msg)
}

fn schema(a: &DataArgs) -> Result<DatasetSchema> {
    let mut categorical_encodings = BTreeMap::new();
    for spec in a.categorical.iter().flatten() {
        let Some((col, reference)) = spec.split_once('=') else {
            bail!("--categorical expects column=reference, got '{spec}'");
        };
        categorical_encodings.insert(col.trim().to_string(), reference.trim().to_string());
    }
    Ok(DatasetSchema {
        time_column: a.time_col.clone().unwrap_or_else(|| "time".into()),
        status_column: a.status_col.clone().unwrap_or_else(|| "status".into()),
        missing_covariate_column: a.missing_col.clone().context("--missing-col is required")?,
        covariate_columns: a.covariates.clone().unwrap_or_default(),
        categorical_encodings,
        missing_token: a.missing_token.clone(),
    })
}

fn imputation_config(a: &DataArgs, seed: u64) -> Result<ImputationConfig> {
    let d = ImputationConfig::default();
    let parse_spec = |s: &Option<String>, default: WorkingSpec| -> Result<WorkingSpec> {
        s.as_deref().map_or(Ok(default), |s| s.parse().map_err(anyhow::Error::msg))
    };
    let x_kind = match a.x_kind.as_deref().unwrap_or("auto") {
        "auto" => CovariateKind::Auto,
        "binary" => CovariateKind::Binary,
        "continuous" => CovariateKind::Continuous,
        other => bail!("unknown --x-kind '{other}' (auto, binary, continuous)"),
    };
    let config = ImputationConfig {
        nn: a.nn.unwrap_or(d.nn),
        w1: a.w1.unwrap_or(d.w1),
        w2: a.w2.unwrap_or(d.w2),
        m: a.m.unwrap_or(d.m),
        seed,
        spec_x: parse_spec(&a.x_model, d.spec_x)?,
        spec_miss: parse_spec(&a.miss_model, d.spec_miss)?,
        x_kind,
        max_redraws: d.max_redraws,
    };
    config.validate()?;
    Ok(config)
}

fn input_path(a: &DataArgs) -> Result<&Path> {
    a.input.as_deref().context("--input is required")
}

fn write_or_print(path: Option<&Path>, body: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, body).with_context(|| format!("writing {}", p.display())),
        None => std::io::stdout().write_all(body.as_bytes()).context("writing to standard output"),
    }
}

/// Metadata goes inside JSON outputs; CSV outputs get a `.meta.json` sidecar
/// (or standard error when writing to standard output).
fn write_metadata_sidecar(output: Option<&Path>, metadata: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(metadata)? + "\n";
    match output {
        Some(p) => {
            let side = sidecar_path(p);
            fs::write(&side, text).with_context(|| format!("writing {}", side.display()))
        }
        None => {
            eprint!("{text}");
            Ok(())
        }
    }
}

fn sidecar_path(p: &Path) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn analyze(mut a: DataArgs) -> Result<()> {
    let seed = init(&mut a.shared)?;
    let metadata = metadata("analyze", seed, &a)?;
    let format = format_of(&a.shared)?;
    let data = load_csv(input_path(&a)?, &schema(&a)?)?;
    let methods = match &a.method {
        None => AnalysisConfig::default().methods,
        Some(v) => v.iter().map(|s| s.parse::<AnalysisMethod>().map_err(anyhow::Error::msg)).collect::<Result<_>>()?,
    };
    let config = AnalysisConfig {
        methods,
        imputation: ImputationConfig { m: a.m.unwrap_or(50), ..imputation_config(&a, seed)? },
        aipw_bootstrap: a.boot.unwrap_or(500),
    };
    eprintln!("analyzing {} rows ({} with {} missing)", data.records.len(), data.records.iter().filter(|r| r.x.is_none()).count(), data.x_name);
    let results = run_analysis(&data, &config)?;
    let out = a.shared.output.as_deref();
    match out {
        Some(p) => write_results(&results, &metadata, format, p)?,
        None => {
            let body = match format {
                OutputFormat::Csv => coxmi::io::results_to_csv(&results),
                OutputFormat::Json => serde_json::to_string_pretty(&json!({ "metadata": metadata, "results": results }))? + "\n",
            };
            write_or_print(None, &body)?;
        }
    }
    if format == OutputFormat::Csv {
        write_metadata_sidecar(out, &metadata)?;
    }
    Ok(())
}

fn impute(mut a: DataArgs) -> Result<()> {
    let seed = init(&mut a.shared)?;
    let metadata = metadata("impute", seed, &a)?;
    let input = input_path(&a)?.to_path_buf();
    let data = load_csv(&input, &schema(&a)?)?;
    let config = imputation_config(&a, seed)?;
    let base = a.shared.output.clone().unwrap_or_else(|| input.clone());
    let stem = base.file_stem().context("output path has no file name")?.to_string_lossy().into_owned();
    let dir = base.parent().map(Path::to_path_buf).unwrap_or_default();
    eprintln!("imputing {} missing cells, M = {}", data.records.iter().filter(|r| r.x.is_none()).count(), config.m);
    let imputations = impute_many(&data.records, &config)?;
    for (k, imp) in imputations.iter().enumerate() {
        let mut table = data.raw.clone();
        for cell in &imp.imputed {
            table.rows[cell.row][data.x_column] = data.raw.rows[cell.donor_row][data.x_column].clone();
        }
        let path = dir.join(format!("{stem}_{}.csv", k + 1));
        write_raw_csv(&path, &table)?;
        eprintln!("wrote {}", path.display());
    }
    let side = dir.join(format!("{stem}.meta.json"));
    fs::write(&side, serde_json::to_string_pretty(&metadata)? + "\n").with_context(|| format!("writing {}", side.display()))
}

fn simulate(mut a: SimArgs) -> Result<()> {
    let seed = init(&mut a.shared)?;
    let metadata = metadata("simulate", seed, &a)?;
    let format = format_of(&a.shared)?;
    let n = a.n.unwrap_or(400);
    let name = a.scenario.as_deref().unwrap_or("table4");
    let mut scenario = match Scenario::by_name(name, n) {
        Some(s) => s,
        None if name.ends_with(".json") => {
            let text = fs::read_to_string(name).with_context(|| format!("reading scenario {name}"))?;
            let mut s = Scenario::from_json(&text).with_context(|| format!("parsing scenario {name}"))?;
            if let Some(n) = a.n {
                s.n = n;
            }
            s
        }
        None => bail!("unknown scenario '{name}' (table4, table5, or a .json file)"),
    };
    if let Some(link) = &a.x_link {
        scenario = scenario.with_x_link(link.parse::<LawLink>().map_err(anyhow::Error::msg)?);
    }
    if let Some(link) = &a.miss_link {
        scenario = scenario.with_miss_link(link.parse::<LawLink>().map_err(anyhow::Error::msg)?).map_err(anyhow::Error::msg)?;
    }
    scenario.validate().map_err(anyhow::Error::msg)?;
    let reps = a.reps.unwrap_or(500);
    if reps == 0 {
        bail!("--reps must be at least 1");
    }
    let defaults = MonteCarloConfig::default();
    let methods = match &a.methods {
        None => defaults.methods.clone(),
        Some(v) => v.iter().map(|s| s.parse::<Method>().map_err(anyhow::Error::msg)).collect::<Result<_>>()?,
    };
    let imputation = ImputationConfig {
        nn: a.nn.unwrap_or(defaults.imputation.nn),
        w1: a.w1.unwrap_or(defaults.imputation.w1),
        w2: a.w2.unwrap_or(defaults.imputation.w2),
        m: a.m.unwrap_or(defaults.imputation.m),
        ..defaults.imputation.clone()
    };
    imputation.validate()?;
    let config = MonteCarloConfig {
        replicates: reps,
        master_seed: seed,
        methods,
        aipw_bootstrap: a.boot.unwrap_or(defaults.aipw_bootstrap),
        imputation,
        progress: true,
        ..defaults
    };
    if reps < 500 {
        eprintln!("warning: {reps} replicates is below the reference 500");
    }
    let summary = run_monte_carlo(&scenario, &config);
    let out = a.shared.output.as_deref();
    match format {
        OutputFormat::Csv => {
            write_or_print(out, &summary.to_csv())?;
            let side = if out.is_some() { json!({ "metadata": metadata, "summary": summary }) } else { metadata };
            write_metadata_sidecar(out, &side)?;
        }
        OutputFormat::Json => {
            write_or_print(out, &(serde_json::to_string_pretty(&json!({ "metadata": metadata, "summary": summary }))? + "\n"))?;
        }
    }
    Ok(())
}
