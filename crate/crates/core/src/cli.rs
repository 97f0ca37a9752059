//! The `equipoise` command line: `analyze`, `simulate`, `estimand` and
//! `theory`.
//!
//! Exit codes: 0 success, 2 bad input or configuration, 3 score model did not
//! converge, 4 trimming emptied an arm, 5 too many failed replicates.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::balance::{balance_report, BalanceReport};
use crate::data::Dataset;
use crate::dgp::{generate, misspecified_terms, true_estimands, ScenarioConfig};
use crate::error::{Error, Result};
use crate::estimate::{estimate_method, EffectEstimate, EstimateOptions, Method, TrimPolicy};
use crate::harness::{default_methods, run_scenario, target_tilt, HarnessOptions, MethodMetrics};
use crate::pscore::{all_columns, build_design, fit_logistic, predict_ps, FitOptions};
use crate::svg::{emit_svg_forest, emit_svg_love};
use crate::term::Term;
use crate::theory::{theory_report, AsymptoticReport};
use crate::tilt::TiltSpec;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "equipoise", version, about = "Propensity-score balancing weights")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate effects, balance and score summaries from a CSV file.
    Analyze(AnalyzeArgs),
    /// Run the simulation cells of a scenario file.
    Simulate(SimulateArgs),
    /// Print super-population estimands for a scenario file.
    Estimand(EstimandArgs),
    /// Print asymptotic variance and bias for a scenario file.
    Theory(TheoryArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrimPolicyArg {
    Refit,
    FullSampleFit,
}

impl From<TrimPolicyArg> for TrimPolicy {
    fn from(t: TrimPolicyArg) -> Self {
        match t {
            TrimPolicyArg::Refit => TrimPolicy::Refit,
            TrimPolicyArg::FullSampleFit => TrimPolicy::FullSampleFit,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct MethodArgs {
    /// Comma-separated methods: ipw, ipw(0.1), att, atc, ow, mw, ew, sipw, or
    /// `standard` for the seven default methods.
    #[arg(long)]
    pub methods: Option<String>,
    /// Trimming threshold; repeat for several.
    #[arg(long)]
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "Y")]
    pub outcome: String,
    #[arg(long, default_value = "Z")]
    pub treatment: String,
    /// Comma-separated score-model terms; defaults to every covariate column.
    #[arg(long)]
    pub terms: Option<String>,
    #[command(flatten)]
    pub methods: MethodArgs,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long, value_enum, default_value_t = TrimPolicyArg::Refit)]
    pub trim_policy: TrimPolicyArg,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub methods: MethodArgs,
    /// Overrides the seed of every cell.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long, value_enum, default_value_t = TrimPolicyArg::Refit)]
    pub trim_policy: TrimPolicyArg,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// Also write the first replicate of each cell as CSV.
    #[arg(long)]
    pub emit_data: bool,
    #[arg(long)]
    pub superpop_n: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EstimandArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub methods: MethodArgs,
    #[arg(long)]
    pub superpop_n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
}

#[derive(Debug, Clone, Args)]
pub struct TheoryArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub methods: MethodArgs,
    /// Monte Carlo size (at least 10^5; the misspecified fit uses at least 10^6).
    #[arg(long, default_value_t = 1_000_000)]
    pub mc_n: usize,
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
}

/// Exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonConvergence { .. } | Error::Singular(_) => 3,
        Error::EmptyArm { .. } => 4,
        Error::ExcessiveFailures { .. } => 5,
        _ => 2,
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Analyze(a) => cmd_analyze(a).map(|_| ()),
        Command::Simulate(a) => cmd_simulate(a).map(|_| ()),
        Command::Estimand(a) => cmd_estimand(a),
        Command::Theory(a) => cmd_theory(a),
    }
}

/// Resolves `--methods` and `--alpha` into a method list. Each `--alpha` adds
/// a trimmed IPW; without `--methods` the trimmed rows of the default list are
/// replaced by them.
pub fn resolve_methods(args: &MethodArgs) -> Result<Vec<Method>> {
    let mut methods = match &args.methods {
        Some(list) => {
            let mut out = Vec::new();
            for tok in split_top_level(list) {
                let tok = tok.trim();
                if tok.is_empty() {
                    continue;
                }
                if tok.eq_ignore_ascii_case("standard") {
                    out.extend(default_methods());
                } else {
                    out.push(tok.parse::<Method>()?);
                }
            }
            out
        }
        None if !args.alpha.is_empty() => default_methods()
            .into_iter()
            .filter(|m| !matches!(m, Method::Balancing(TiltSpec::TrimmedIpw(_))))
            .collect(),
        None => default_methods(),
    };
    for &a in &args.alpha {
        let m = Method::Balancing(TiltSpec::trimmed(a)?);
        if !methods.contains(&m) {
            methods.push(m);
        }
    }
    if methods.is_empty() {
        return Err(Error::InvalidConfig("no methods requested".into()));
    }
    if args.alpha.is_empty() {
        return Ok(methods);
    }
    // Appended trimmed rows go next to IPW, in increasing threshold order.
    let key = |m: &Method| match m {
        Method::Balancing(TiltSpec::Ipw) => (0, 0.0),
        Method::Balancing(TiltSpec::TrimmedIpw(a)) => (1, *a),
        _ => (2, 0.0),
    };
    let (mut head, tail): (Vec<Method>, Vec<Method>) = methods.into_iter().partition(|m| key(m).0 < 2);
    head.sort_by(|a, b| key(a).partial_cmp(&key(b)).expect("finite thresholds"));
    head.extend(tail);
    Ok(head)
}

fn split_top_level(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let (mut depth, mut start) = (0i32, 0);
    for (i, c) in s.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth == 0 => {
                out.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push(&s[start..]);
    out
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("confidence level {level} outside (0, 1)")))
    }
}

/// Formats to 6 significant digits in the shortest form.
pub fn sig6(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let rounded: f64 = format!("{x:.5e}").parse().expect("formatted float parses");
    rounded.to_string()
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidData(format!("CSV: {e}"))
}

fn json_err(e: serde_json::Error) -> Error {
    Error::InvalidConfig(format!("JSON: {e}"))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))
}

/// Reads a header-first numeric CSV into a dataset. Every column other than
/// `outcome` and `treatment` becomes a covariate.
pub fn read_csv(path: &Path, outcome: &str, treatment: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::InvalidData(format!("{}: {e}", path.display())))?;
    let headers: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    let find = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::UnknownColumn(name.to_string()))
    };
    let (yi, zi) = (find(outcome)?, find(treatment)?);
    if yi == zi {
        return Err(Error::InvalidData("outcome and treatment name the same column".into()));
    }
    let cov_idx: Vec<usize> = (0..headers.len()).filter(|&j| j != yi && j != zi).collect();
    if cov_idx.is_empty() {
        return Err(Error::InvalidData("no covariate columns".into()));
    }
    let (mut y, mut z) = (Vec::new(), Vec::new());
    let mut cols = vec![Vec::new(); cov_idx.len()];
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let num = |j: usize| -> Result<f64> {
            let s = rec.get(j).unwrap_or("");
            s.parse::<f64>().map_err(|_| {
                Error::InvalidData(format!("row {}: `{}` = {s:?} is not a number", row + 1, headers[j]))
            })
        };
        y.push(num(yi)?);
        z.push(num(zi)?);
        for (c, &j) in cols.iter_mut().zip(&cov_idx) {
            c.push(num(j)?);
        }
    }
    let names = cov_idx.iter().map(|&j| headers[j].clone()).collect();
    Dataset::new(y, z, cols, names)
}

/// Writes `data` as CSV with full-precision values.
pub fn write_data_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["Y".to_string(), "Z".to_string()];
    header.extend(data.names().iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..data.n() {
        let mut rec = vec![data.y()[i].to_string(), u8::from(data.z()[i]).to_string()];
        rec.extend(data.columns().iter().map(|c| c[i].to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Five-number summary plus mean of the fitted scores in one arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsSummary {
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub mean: f64,
    pub q3: f64,
    pub max: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn ps_summary(e: &[f64]) -> PsSummary {
    let mut s = e.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    PsSummary {
        n: s.len(),
        min: s[0],
        q1: quantile(&s, 0.25),
        median: quantile(&s, 0.5),
        mean: s.iter().sum::<f64>() / s.len() as f64,
        q3: quantile(&s, 0.75),
        max: s[s.len() - 1],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrimmingCount {
    pub alpha: f64,
    pub retained: usize,
    pub retained_treated: usize,
    pub retained_control: usize,
    pub pct_retained: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub n: usize,
    pub n_treated: usize,
    pub terms: Vec<String>,
    pub beta: Vec<f64>,
    pub iterations: usize,
    pub ps_treated: PsSummary,
    pub ps_control: PsSummary,
    pub trimming: Vec<TrimmingCount>,
    pub estimates: Vec<EffectEstimate>,
    pub balance: BalanceReport,
}

/// The analysis pipeline on an in-memory dataset.
pub fn analyze(data: &Dataset, terms: &[Term], methods: &[Method], opts: &EstimateOptions) -> Result<AnalysisReport> {
    if methods.is_empty() {
        return Err(Error::InvalidConfig("no methods requested".into()));
    }
    check_level(opts.level)?;
    let design = build_design(data, terms)?;
    let model = fit_logistic(&design, data.z(), &opts.fit)?;
    let e = predict_ps(&model, &design)?.e;
    let estimates = methods
        .iter()
        .map(|&m| estimate_method(data, &design, &e, m, opts))
        .collect::<Result<Vec<_>>>()?;

    let z = data.z();
    let split = |arm: bool| e.iter().zip(z).filter(|(_, &t)| t == arm).map(|(&p, _)| p).collect::<Vec<_>>();
    let trimming = methods
        .iter()
        .filter_map(|m| match m {
            Method::Balancing(TiltSpec::TrimmedIpw(a)) => Some(*a),
            _ => None,
        })
        .map(|alpha| {
            let keep = |p: f64| p >= alpha && p <= 1.0 - alpha;
            let rt = e.iter().zip(z).filter(|(&p, &t)| t && keep(p)).count();
            let rc = e.iter().zip(z).filter(|(&p, &t)| !t && keep(p)).count();
            TrimmingCount {
                alpha,
                retained: rt + rc,
                retained_treated: rt,
                retained_control: rc,
                pct_retained: 100.0 * (rt + rc) as f64 / e.len() as f64,
            }
        })
        .collect();
    let tilts: Vec<TiltSpec> = methods
        .iter()
        .filter_map(|m| match m {
            Method::Balancing(s) => Some(*s),
            Method::StabilizedIpw => None,
        })
        .collect();
    let balance = balance_report(data, &design, &model, &tilts)?;
    Ok(AnalysisReport {
        n: data.n(),
        n_treated: data.n_treated(),
        terms: design.labels().to_vec(),
        beta: model.beta.clone(),
        iterations: model.iterations,
        ps_treated: ps_summary(&split(true)),
        ps_control: ps_summary(&split(false)),
        trimming,
        estimates,
        balance,
    })
}

pub const ESTIMATE_COLUMNS: [&str; 11] =
    ["Method", "N", "Retained", "PctRetained", "Delta", "Delta1", "Delta0", "SE", "CILow", "CIHigh", "VI"];

pub fn estimates_csv(estimates: &[EffectEstimate]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(ESTIMATE_COLUMNS).map_err(csv_err)?;
    for e in estimates {
        w.write_record([
            e.method.to_string(),
            e.n.to_string(),
            e.n_retained.to_string(),
            sig6(100.0 * e.n_retained as f64 / e.n as f64),
            sig6(e.delta),
            sig6(e.delta1),
            sig6(e.delta0),
            sig6(e.se),
            sig6(e.ci_low),
            sig6(e.ci_high),
            sig6(e.vi),
        ])
        .map_err(csv_err)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.to_string()))?).map_err(|e| Error::Io(e.to_string()))
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<AnalysisReport> {
    check_level(args.level)?;
    let data = read_csv(&args.input, &args.outcome, &args.treatment)?;
    let terms = match &args.terms {
        Some(t) => Term::parse_list(t)?,
        None => all_columns(&data),
    };
    let methods = resolve_methods(&args.methods)?;
    let opts = EstimateOptions { level: args.level, trim: args.trim_policy.into(), fit: FitOptions::default() };
    let report = analyze(&data, &terms, &methods, &opts)?;

    ensure_dir(&args.out_dir)?;
    write_file(&args.out_dir.join("report.json"), &serde_json::to_string_pretty(&report).map_err(json_err)?)?;
    write_file(&args.out_dir.join("estimates.csv"), &estimates_csv(&report.estimates)?)?;
    write_file(&args.out_dir.join("love.svg"), &emit_svg_love(&report.balance)?)?;
    write_file(&args.out_dir.join("forest.svg"), &emit_svg_forest(&report.estimates)?)?;

    println!("{:<12} {:>7} {:>10} {:>10} {:>10} {:>10} {:>8}", "Method", "n", "Estimate", "SE", "CI low", "CI high", "VI");
    for e in &report.estimates {
        println!(
            "{:<12} {:>7} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>8.3}",
            e.method.to_string(),
            e.n_retained,
            e.delta,
            e.se,
            e.ci_low,
            e.ci_high,
            e.vi
        );
    }
    Ok(report)
}

/// A scenario file: one or more simulation cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub schema_version: u32,
    pub cells: Vec<ScenarioConfig>,
    /// Methods, in `--methods` syntax; command-line flags take precedence.
    #[serde(default)]
    pub methods: Option<Vec<String>>,
    #[serde(default)]
    pub superpop_n: Option<usize>,
}

pub fn read_scenario_file(path: &Path) -> Result<ScenarioFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    let file: ScenarioFile = serde_json::from_str(&text).map_err(json_err)?;
    if file.schema_version != SCHEMA_VERSION {
        return Err(Error::InvalidConfig(format!(
            "schema_version {} is not supported (expected {SCHEMA_VERSION})",
            file.schema_version
        )));
    }
    if file.cells.is_empty() {
        return Err(Error::InvalidConfig("scenario file has no cells".into()));
    }
    for c in &file.cells {
        c.validate()?;
    }
    Ok(file)
}

fn scenario_methods(args: &MethodArgs, file: &ScenarioFile) -> Result<Vec<Method>> {
    if args.methods.is_none() {
        if let Some(list) = &file.methods {
            let merged = MethodArgs { methods: Some(list.join(",")), alpha: args.alpha.clone() };
            return resolve_methods(&merged);
        }
    }
    resolve_methods(args)
}

fn snake<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

/// File stem naming a cell.
pub fn cell_stem(index: usize, c: &ScenarioConfig) -> String {
    format!(
        "cell{index:02}_{}_{}_{}_{}_{}_n{}",
        snake(&c.dgp),
        snake(&c.overlap),
        snake(&c.prevalence),
        snake(&c.effect),
        snake(&c.misspec),
        c.n
    )
}

pub const METRIC_COLUMNS: [&str; 9] = ["Weight", "Overlap", "True", "Bias", "RMSE", "SD", "SE", "CP", "Failed"];

/// One row per method: relative bias in percent, the rest on the outcome
/// scale, at 6 significant digits.
pub fn metrics_csv(config: &ScenarioConfig, metrics: &[MethodMetrics]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRIC_COLUMNS).map_err(csv_err)?;
    let overlap = snake(&config.overlap);
    for m in metrics {
        w.write_record([
            m.method.to_string(),
            overlap.clone(),
            sig6(m.true_value),
            sig6(m.rel_bias_pct),
            sig6(m.rmse),
            sig6(m.sd),
            sig6(m.mean_se),
            sig6(m.coverage),
            m.n_failed.to_string(),
        ])
        .map_err(csv_err)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.to_string()))?).map_err(|e| Error::Io(e.to_string()))
}

/// A metrics CSV row read back.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub method: Method,
    pub overlap: String,
    pub true_value: f64,
    pub rel_bias_pct: f64,
    pub rmse: f64,
    pub sd: f64,
    pub mean_se: f64,
    pub coverage: f64,
    pub n_failed: usize,
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let headers: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if headers != METRIC_COLUMNS {
        return Err(Error::InvalidData(format!("unexpected metrics header {headers:?}")));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| Error::InvalidData(format!("`{s}` is not a number")));
    rdr.records()
        .map(|rec| {
            let r = rec.map_err(csv_err)?;
            Ok(MetricsRow {
                method: r[0].parse()?,
                overlap: r[1].to_string(),
                true_value: num(&r[2])?,
                rel_bias_pct: num(&r[3])?,
                rmse: num(&r[4])?,
                sd: num(&r[5])?,
                mean_se: num(&r[6])?,
                coverage: num(&r[7])?,
                n_failed: r[8].parse().map_err(|_| Error::InvalidData(format!("`{}` is not a count", &r[8])))?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub config: ScenarioConfig,
    pub metrics: Vec<MethodMetrics>,
    /// Estimates on replicate 0, the one written by `--emit-data`.
    pub first_replicate: Vec<Option<EffectEstimate>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationOutput {
    pub schema_version: u32,
    pub cells: Vec<CellResult>,
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<SimulationOutput> {
    check_level(args.level)?;
    let file = read_scenario_file(&args.config)?;
    let methods = scenario_methods(&args.methods, &file)?;
    let mut opts = HarnessOptions {
        workers: args.workers,
        level: args.level,
        trim: args.trim_policy.into(),
        ..HarnessOptions::default()
    };
    if let Some(n) = args.superpop_n.or(file.superpop_n) {
        opts.superpop_n = n;
    }

    let mut cells = Vec::with_capacity(file.cells.len());
    let mut outputs = Vec::new();
    for (k, cell) in file.cells.iter().enumerate() {
        let mut config = *cell;
        if let Some(seed) = args.seed {
            config.seed = seed;
        }
        let run = run_scenario(&config, &methods, &opts)?;
        let stem = cell_stem(k, &config);
        outputs.push((format!("{stem}.csv"), metrics_csv(&config, &run.metrics)?));
        cells.push(CellResult {
            config,
            metrics: run.metrics,
            first_replicate: run.estimates.into_iter().next().unwrap_or_default(),
        });
    }

    let output = SimulationOutput { schema_version: SCHEMA_VERSION, cells };
    ensure_dir(&args.out_dir)?;
    for (name, text) in &outputs {
        write_file(&args.out_dir.join(name), text)?;
    }
    if args.emit_data {
        for (k, cell) in output.cells.iter().enumerate() {
            let sim = generate(&cell.config, 0)?;
            write_data_csv(&args.out_dir.join(format!("{}_data.csv", cell_stem(k, &cell.config))), &sim.dataset)?;
        }
    }
    write_file(&args.out_dir.join("metrics.json"), &serde_json::to_string_pretty(&output).map_err(json_err)?)?;

    for (k, cell) in output.cells.iter().enumerate() {
        println!("{}", cell_stem(k, &cell.config));
        println!(
            "  {:<10} {:>8} {:>8} {:>8} {:>8} {:>8} {:>6}",
            "Weight", "True", "Bias%", "RMSE", "SD", "SE", "CP"
        );
        for m in &cell.metrics {
            println!(
                "  {:<10} {:>8.4} {:>8.2} {:>8.4} {:>8.4} {:>8.4} {:>6.3}",
                m.method.to_string(),
                m.true_value,
                m.rel_bias_pct,
                m.rmse,
                m.sd,
                m.mean_se,
                m.coverage
            );
        }
    }
    Ok(output)
}

fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Io(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

fn distinct_tilts(methods: &[Method]) -> Vec<TiltSpec> {
    let mut out: Vec<TiltSpec> = Vec::new();
    for &m in methods {
        let t = target_tilt(m);
        if !out.contains(&t) {
            out.push(t);
        }
    }
    out
}

pub fn cmd_estimand(args: &EstimandArgs) -> Result<()> {
    let file = read_scenario_file(&args.config)?;
    let tilts = distinct_tilts(&scenario_methods(&args.methods, &file)?);
    let n = args.superpop_n.or(file.superpop_n).unwrap_or(HarnessOptions::default().superpop_n);
    for (k, cell) in file.cells.iter().enumerate() {
        let values = with_workers(args.workers, || true_estimands(cell, &tilts, n))??;
        println!("{}", cell_stem(k, cell));
        for (t, v) in tilts.iter().zip(values) {
            println!("  {:<10} {:.6} ± {:.6}", t.to_string(), v.value, v.mc_se);
        }
    }
    Ok(())
}

pub fn cmd_theory(args: &TheoryArgs) -> Result<()> {
    let file = read_scenario_file(&args.config)?;
    let tilts = distinct_tilts(&scenario_methods(&args.methods, &file)?);
    for (k, cell) in file.cells.iter().enumerate() {
        let reports: Vec<AsymptoticReport> = with_workers(args.workers, || theory_report(cell, &tilts, args.mc_n))??;
        println!("{}", cell_stem(k, cell));
        println!("  {:<10} {:>12} {:>10} {:>12} {:>10}", "Weight", "AV", "MC-SE", "ABias", "MC-SE");
        for r in &reports {
            println!(
                "  {:<10} {:>12.4} {:>10.4} {:>12.6} {:>10.6}",
                r.method.to_string(),
                r.av,
                r.mc_se_av,
                r.abias,
                r.mc_se_abias
            );
        }
    }
    Ok(())
}

/// The misspecified terms of a cell, as a `--terms` argument.
pub fn terms_argument(config: &ScenarioConfig) -> Result<String> {
    Ok(misspecified_terms(config)?.iter().map(|t| t.label.clone()).collect::<Vec<_>>().join(","))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(0.047712345), "0.0477123");
        assert_eq!(sig6(-0.08), "-0.08");
        assert_eq!(sig6(1234567.0), "1234570");
        assert_eq!(sig6(0.0), "0");
    }

    #[test]
    fn method_resolution() {
        let m = resolve_methods(&MethodArgs { methods: None, alpha: vec![] }).unwrap();
        assert_eq!(m.len(), 7);
        let m = resolve_methods(&MethodArgs { methods: Some("ow".into()), alpha: vec![] }).unwrap();
        assert_eq!(m, vec![Method::Balancing(TiltSpec::Overlap)]);
        let m = resolve_methods(&MethodArgs { methods: None, alpha: vec![0.2, 0.1] }).unwrap();
        assert_eq!(m[1], Method::Balancing(TiltSpec::TrimmedIpw(0.1)));
        assert_eq!(m.len(), 6);
        let m = resolve_methods(&MethodArgs { methods: Some("standard,sipw".into()), alpha: vec![] }).unwrap();
        assert_eq!(m.len(), 8);
        assert!(resolve_methods(&MethodArgs { methods: Some("".into()), alpha: vec![] }).is_err());
        assert!(resolve_methods(&MethodArgs { methods: None, alpha: vec![0.7] }).is_err());
    }

    #[test]
    fn quantiles_are_ordered() {
        let s = ps_summary(&[0.9, 0.1, 0.5, 0.3]);
        assert_eq!((s.min, s.max), (0.1, 0.9));
        assert!((s.median - 0.4).abs() < 1e-15);
        assert!(s.min <= s.q1 && s.q1 <= s.median && s.median <= s.q3 && s.q3 <= s.max);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::NonConvergence { iterations: 1, max_abs_score: 1.0 }), 3);
        assert_eq!(exit_code(&Error::EmptyArm { arm: "treated" }), 4);
        assert_eq!(exit_code(&Error::ExcessiveFailures { failed: 60, replicates: 1000 }), 5);
        assert_eq!(exit_code(&Error::InvalidConfig(String::new())), 2);
    }
}
