//! Command-line front end.
//!
//! Exit codes: 0 on success, 2 for bad input or usage, 3 when a numeric step
//! (fitting, solving) fails.

mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::dataset::{load_csv, CsvSchema, Dataset};
use crate::effects::{balance_report, dose_chain, estimate_pairwise};
use crate::error::{Error, Result};
use crate::io::{self, EffectsFile, ExperimentFile, MatchFile, Metadata};
use crate::matching::{match_all_pivots, match_units, pivot_criterion, select_best_pivot, MatchSpec, MeanNorm, Metric, SearchMode};
use crate::ratio_estim::BasisConfig;
use crate::scores::{DensitySpec, KnownDensityModel, LogitFitOptions, ScoreTable};
use crate::simulation::{
    generate, pipeline_scores, run_experiment, PipelineConfig, ScoreKind, SimulationScenario,
};

const SUBCOMMANDS: &[&str] = &["score", "match", "estimate", "diagnose", "simulate", "generate"];

#[derive(Debug, Parser)]
#[command(name = "smatch", version, about = "Multi-arm balancing-score matching and effect estimation")]
#[command(args_override_self = true)]
struct Cli {
    /// Seed for every randomized step.
    #[arg(long, env = "SMATCH_SEED", default_value_t = 0, global = true)]
    seed: u64,
    /// Directory receiving output files.
    #[arg(long, default_value = ".", global = true)]
    out_dir: PathBuf,
    /// Output formats, comma-separated.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "csv,json", global = true)]
    format: Vec<Format>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compute score vectors for every unit.
    Score(ScoreArgs),
    /// Match anchor units to every other arm.
    Match(MatchArgs),
    /// Estimate pairwise effects from a match file.
    Estimate(EstimateArgs),
    /// Covariate balance before and after matching.
    Diagnose(DiagnoseArgs),
    /// Monte Carlo check of the whole pipeline on a scenario.
    Simulate(SimulateArgs),
    /// Draw one dataset from a scenario.
    Generate(GenerateArgs),
}

#[derive(Debug, Args, Serialize)]
struct DataArgs {
    /// Input CSV.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "treatment")]
    treatment_col: String,
    /// Covariate columns, comma-separated.
    #[arg(long, value_delimiter = ',', required = true)]
    covariate_cols: Vec<String>,
    #[arg(long)]
    response_col: Option<String>,
    /// Unit id column; row numbers otherwise.
    #[arg(long)]
    id_col: Option<String>,
    /// Treatment level order, comma-separated; first appearance otherwise.
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<String>>,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset> {
        load_csv(
            &self.input,
            &CsvSchema {
                treatment_col: self.treatment_col.clone(),
                covariate_cols: self.covariate_cols.clone(),
                response_col: self.response_col.clone(),
                id_col: self.id_col.clone(),
                level_order: self.levels.clone(),
            },
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ModelKind {
    /// Known per-arm densities (`--known-model`).
    Known,
    /// Fitted multinomial logit.
    Glm,
    /// Density-ratio estimate against the pivot arm.
    Ratio,
}

#[derive(Debug, Args, Serialize)]
struct ModelArgs {
    #[arg(long, value_enum, default_value = "glm")]
    model: ModelKind,
    /// JSON density family for `--model known`.
    #[arg(long)]
    known_model: Option<PathBuf>,
    /// Ridge penalty for the logit fit.
    #[arg(long, default_value_t = 1e-6)]
    ridge: f64,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    /// Kernel centers per density-ratio fit.
    #[arg(long, default_value_t = 100)]
    ratio_centers: usize,
    /// Cross-validation folds for density-ratio fits.
    #[arg(long, default_value_t = 5)]
    folds: usize,
}

impl ModelArgs {
    fn logit_options(&self) -> LogitFitOptions {
        LogitFitOptions {
            ridge: self.ridge,
            max_iter: self.max_iter,
            ..LogitFitOptions::default()
        }
    }

    fn basis(&self, seed: u64) -> BasisConfig {
        BasisConfig {
            max_centers: self.ratio_centers,
            folds: self.folds,
            seed,
            ..BasisConfig::default()
        }
    }

    fn known(&self, d: &Dataset) -> Result<KnownDensityModel> {
        let path = self
            .known_model
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("--model known needs --known-model <file>".into()))?;
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: DensitySpec = serde_json::from_str(&text)?;
        let labels: Vec<&str> = d.levels().iter().map(|l| l.label.as_str()).collect();
        let model = KnownDensityModel::new(&spec.reorder(&labels)?)?;
        Ok(model)
    }

    fn scores(&self, d: &Dataset, pivot: usize, seed: u64) -> Result<ScoreTable> {
        let score = match self.model {
            ModelKind::Known => return ScoreTable::from_model(&self.known(d)?, d, pivot),
            ModelKind::Glm => ScoreKind::FittedLogit {
                options: self.logit_options(),
            },
            ModelKind::Ratio => ScoreKind::Ratio {
                config: self.basis(seed),
            },
        };
        let cfg = PipelineConfig {
            score,
            standardize: true,
            matching: MatchSpec::new(pivot),
        };
        pipeline_scores(d, &cfg, None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum MetricArg {
    Log,
    Ratio,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum NormArg {
    Euclidean,
    Sup,
}

#[derive(Debug, Args, Serialize)]
struct MatchFlags {
    /// Pivot level label; the first level by default.
    #[arg(long)]
    pivot: Option<String>,
    /// Arm supplying the anchors; the pivot by default.
    #[arg(long)]
    anchor: Option<String>,
    /// Matches per anchor in each other arm.
    #[arg(long, default_value_t = 1)]
    ratio_k: usize,
    #[arg(long, overrides_with = "no_replacement")]
    #[serde(skip)]
    with_replacement: bool,
    /// Echoed as the effective `replacement` setting.
    #[arg(long, overrides_with = "with_replacement")]
    #[serde(rename = "replacement", serialize_with = "negated")]
    no_replacement: bool,
    /// Largest admissible squared score distance.
    #[arg(long)]
    caliper: Option<f64>,
    #[arg(long, value_enum, default_value = "log")]
    metric: MetricArg,
    /// Exhaustive scan instead of the k-d tree.
    #[arg(long)]
    brute_force: bool,
}

fn negated<S: serde::Serializer>(v: &bool, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_bool(!*v)
}

impl MatchFlags {
    /// `level` maps a level label to its index.
    fn spec(&self, level: impl Fn(&str) -> Result<usize>) -> Result<MatchSpec> {
        let pivot = self.pivot.as_deref().map(&level).transpose()?.unwrap_or(0);
        let anchor_arm = self.anchor.as_deref().map(&level).transpose()?.unwrap_or(pivot);
        if self.ratio_k == 0 {
            return Err(Error::InvalidInput("--ratio-k must be at least 1".into()));
        }
        if let Some(c) = self.caliper {
            if !(c >= 0.0) {
                return Err(Error::InvalidInput("--caliper must be nonnegative".into()));
            }
        }
        Ok(MatchSpec {
            pivot,
            anchor_arm,
            neighbors_per_arm: self.ratio_k,
            with_replacement: !self.no_replacement,
            caliper: self.caliper,
            metric: match self.metric {
                MetricArg::Log => Metric::Log,
                MetricArg::Ratio => Metric::Ratio,
            },
            search: if self.brute_force { SearchMode::Scan } else { SearchMode::KdTree },
        })
    }
}

#[derive(Debug, Args, Serialize)]
struct ScoreArgs {
    #[command(flatten)]
    #[serde(flatten)]
    data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArgs,
    /// Pivot level label; the first level by default.
    #[arg(long)]
    pivot: Option<String>,
}

#[derive(Debug, Args, Serialize)]
struct MatchArgs {
    #[command(flatten)]
    #[serde(flatten)]
    data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    matching: MatchFlags,
    /// Precomputed score CSV; replaces the model.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Match under every pivot and keep the best-balanced set.
    #[arg(long)]
    all_pivots: bool,
    /// Norm for best-set selection.
    #[arg(long, value_enum, default_value = "euclidean")]
    select_best: NormArg,
}

#[derive(Debug, Args, Serialize)]
struct EstimateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    data: DataArgs,
    /// Match JSON written by `match`.
    #[arg(long)]
    match_file: PathBuf,
    /// Level labels in dose order, comma-separated.
    #[arg(long, value_delimiter = ',')]
    dose_order: Option<Vec<String>>,
}

#[derive(Debug, Args, Serialize)]
struct DiagnoseArgs {
    #[command(flatten)]
    #[serde(flatten)]
    data: DataArgs,
    #[arg(long)]
    match_file: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum SimModel {
    /// The scenario's own assignment law.
    True,
    Glm,
    Ratio,
    /// Zero score (no adjustment).
    Constant,
}

#[derive(Debug, Args, Serialize)]
struct SimulateArgs {
    /// Scenario JSON; the built-in reference scenario otherwise.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 200)]
    reps: usize,
    #[arg(long, value_enum, default_value = "glm")]
    model: SimModel,
    #[arg(long, default_value_t = 1e-6)]
    ridge: f64,
    /// Fit scores on raw rather than standardized covariates.
    #[arg(long)]
    raw_covariates: bool,
    #[command(flatten)]
    #[serde(flatten)]
    matching: MatchFlags,
}

#[derive(Debug, Args, Serialize)]
struct GenerateArgs {
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    n: usize,
}

/// Runs the CLI on `args` and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args = match config::expand(args.into_iter().map(Into::into).collect(), SUBCOMMANDS) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_input_error() {
                2
            } else {
                3
            }
        }
    }
}

pub fn main() -> i32 {
    run(std::env::args_os())
}

fn echo<T: Serialize>(args: &T, cli: &Cli) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    if let Ok(serde_json::Value::Object(map)) = serde_json::to_value(args) {
        for (k, v) in map {
            let s = match v {
                serde_json::Value::Null => continue,
                serde_json::Value::String(s) => s,
                other => other.to_string(),
            };
            out.insert(k, s);
        }
    }
    let formats: Vec<&str> = cli
        .format
        .iter()
        .map(|f| match f {
            Format::Csv => "csv",
            Format::Json => "json",
        })
        .collect();
    out.insert("format".into(), formats.join(","));
    out
}

fn check_input(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{} is not a readable file", path.display())))
    }
}

struct Output<'a> {
    dir: &'a Path,
    formats: &'a [Format],
}

impl Output<'_> {
    fn prepare(cli: &Cli) -> Result<Output<'_>> {
        std::fs::create_dir_all(&cli.out_dir).map_err(|e| Error::io(&cli.out_dir, e))?;
        Ok(Output {
            dir: &cli.out_dir,
            formats: &cli.format,
        })
    }

    fn wants(&self, f: Format) -> bool {
        self.formats.contains(&f)
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        io::write_file(&path, bytes)?;
        eprintln!("wrote {}", path.display());
        Ok(())
    }
}

fn labels(d: &Dataset) -> Vec<String> {
    d.levels().iter().map(|l| l.label.clone()).collect()
}

fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Score(a) => cmd_score(cli, a),
        Command::Match(a) => cmd_match(cli, a),
        Command::Estimate(a) => cmd_estimate(cli, a),
        Command::Diagnose(a) => cmd_diagnose(cli, a),
        Command::Simulate(a) => cmd_simulate(cli, a),
        Command::Generate(a) => cmd_generate(cli, a),
    }
}

#[derive(Serialize)]
struct ScoreRow<'a> {
    id: &'a str,
    s_log: &'a [f64],
}

#[derive(Serialize)]
struct ScoreFile<'a> {
    metadata: &'a Metadata,
    levels: &'a [String],
    pivot: &'a str,
    scores: Vec<ScoreRow<'a>>,
}

fn cmd_score(cli: &Cli, a: &ScoreArgs) -> Result<()> {
    check_input(&a.data.input)?;
    if let Some(p) = &a.model.known_model {
        check_input(p)?;
    }
    let out = Output::prepare(cli)?;
    let d = a.data.load()?;
    let pivot = match &a.pivot {
        Some(l) => d.level_index(l)?,
        None => 0,
    };
    let table = a.model.scores(&d, pivot, cli.seed)?;
    let meta = Metadata::new("score", cli.seed, echo(a, cli));
    let lv = labels(&d);
    if out.wants(Format::Csv) {
        out.write("scores.csv", &io::scores_csv(&table, &lv, &meta)?)?;
    }
    if out.wants(Format::Json) {
        let file = ScoreFile {
            metadata: &meta,
            levels: &lv,
            pivot: &lv[pivot],
            scores: table
                .entries()
                .iter()
                .map(|(id, sv)| ScoreRow {
                    id,
                    s_log: &sv.log_values,
                })
                .collect(),
        };
        out.write("scores.json", &io::to_json(&file)?)?;
    }
    Ok(())
}

fn cmd_match(cli: &Cli, a: &MatchArgs) -> Result<()> {
    check_input(&a.data.input)?;
    if let Some(p) = &a.scores {
        check_input(p)?;
    } else if let Some(p) = &a.model.known_model {
        check_input(p)?;
    }
    let out = Output::prepare(cli)?;
    let d = a.data.load()?;
    let spec = a.matching.spec(|l| d.level_index(l))?;
    let precomputed = a.scores.as_deref().map(|p| io::read_scores_csv(p, &d)).transpose()?;
    let provider = |pivot: usize| match &precomputed {
        Some(t) => t.transform(pivot),
        None => a.model.scores(&d, pivot, cli.seed),
    };
    let lv = labels(&d);
    let (result, selected_pivot, pivot_criteria) = if a.all_pivots {
        let norm = match a.select_best {
            NormArg::Euclidean => MeanNorm::Euclidean,
            NormArg::Sup => MeanNorm::Sup,
        };
        let results = match_all_pivots(&d, provider, &spec)?;
        let mut criteria = BTreeMap::new();
        for (p, r) in &results {
            criteria.insert(lv[*p].clone(), pivot_criterion(r, &d, norm)?);
        }
        let (best, r) = select_best_pivot(&results, &d, norm)?;
        eprintln!("selected pivot: {}", lv[best]);
        (r.clone(), Some(lv[best].clone()), criteria)
    } else {
        let table = provider(spec.pivot)?;
        (match_units(&d, &table, &spec)?, None, BTreeMap::new())
    };
    let anchors = result.groups.len() + result.unmatched.len();
    if result.groups.is_empty() {
        eprintln!("warning: all {anchors} anchors are unmatched");
    } else if !result.unmatched.is_empty() {
        eprintln!("warning: {} of {anchors} anchors are unmatched", result.unmatched.len());
    }
    let meta = Metadata::new("match", cli.seed, echo(a, cli));
    if out.wants(Format::Csv) {
        out.write("matches.csv", &io::matches_csv(&result, &lv, &meta)?)?;
    }
    // The JSON form is what `estimate` and `diagnose` read, so it is always written.
    let file = MatchFile {
        metadata: meta,
        levels: lv,
        selected_pivot,
        pivot_criteria,
        result,
    };
    out.write("matches.json", &io::to_json(&file)?)
}

fn load_match_file(path: &Path, d: &Dataset) -> Result<MatchFile> {
    let m = MatchFile::read(path)?;
    m.check_levels(d)?;
    Ok(m)
}

fn cmd_estimate(cli: &Cli, a: &EstimateArgs) -> Result<()> {
    check_input(&a.data.input)?;
    check_input(&a.match_file)?;
    if a.data.response_col.is_none() {
        return Err(Error::InvalidInput("estimate needs --response-col".into()));
    }
    let out = Output::prepare(cli)?;
    let d = a.data.load()?;
    let m = load_match_file(&a.match_file, &d)?;
    let report = estimate_pairwise(&m.result, &d)?;
    let chain = match &a.dose_order {
        Some(order) => {
            let idx = order.iter().map(|l| d.level_index(l)).collect::<Result<Vec<_>>>()?;
            Some(dose_chain(&m.result, &d, &idx)?)
        }
        None => None,
    };
    if let Some(c) = &report.caveat {
        eprintln!("note: {c}");
    }
    let file = EffectsFile {
        metadata: Metadata::new("estimate", cli.seed, echo(a, cli)),
        levels: labels(&d),
        report,
        chain,
    };
    if out.wants(Format::Csv) {
        out.write("effects.csv", &io::effects_csv(&file)?)?;
    }
    if out.wants(Format::Json) {
        out.write("effects.json", &io::to_json(&file)?)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct BalanceFile<'a> {
    metadata: &'a Metadata,
    levels: Vec<String>,
    covariates: &'a [String],
    report: &'a crate::effects::BalanceReport,
}

fn cmd_diagnose(cli: &Cli, a: &DiagnoseArgs) -> Result<()> {
    check_input(&a.data.input)?;
    check_input(&a.match_file)?;
    let out = Output::prepare(cli)?;
    let d = a.data.load()?;
    let m = load_match_file(&a.match_file, &d)?;
    let report = balance_report(&d, &m.result)?;
    let meta = Metadata::new("diagnose", cli.seed, echo(a, cli));
    if out.wants(Format::Csv) {
        out.write("balance.csv", &io::balance_csv(&report, &d, &meta)?)?;
    }
    if out.wants(Format::Json) {
        let file = BalanceFile {
            metadata: &meta,
            levels: labels(&d),
            covariates: d.covariate_names(),
            report: &report,
        };
        out.write("balance.json", &io::to_json(&file)?)?;
    }
    Ok(())
}

fn load_scenario(path: Option<&Path>) -> Result<SimulationScenario> {
    let sc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text)?
        }
        None => SimulationScenario::reference(),
    };
    sc.validate()?;
    Ok(sc)
}

fn cmd_simulate(cli: &Cli, a: &SimulateArgs) -> Result<()> {
    if let Some(p) = &a.scenario {
        check_input(p)?;
    }
    let out = Output::prepare(cli)?;
    let sc = load_scenario(a.scenario.as_deref())?;
    let levels = sc.level_labels();
    let index = |l: &str| {
        levels
            .iter()
            .position(|x| x == l)
            .ok_or_else(|| Error::InvalidInput(format!("unknown treatment level '{l}'")))
    };
    let matching = a.matching.spec(index)?;
    let score = match a.model {
        SimModel::True => ScoreKind::TrueLogit,
        SimModel::Glm => ScoreKind::FittedLogit {
            options: LogitFitOptions {
                ridge: a.ridge,
                ..LogitFitOptions::default()
            },
        },
        SimModel::Ratio => ScoreKind::Ratio {
            config: BasisConfig {
                seed: cli.seed,
                ..BasisConfig::default()
            },
        },
        SimModel::Constant => ScoreKind::Constant,
    };
    let cfg = PipelineConfig {
        score,
        standardize: !a.raw_covariates,
        matching,
    };
    let report = run_experiment(&sc, &cfg, a.n, a.reps, cli.seed)?;
    for f in &report.failures {
        eprintln!("warning: {f}");
    }
    let file = ExperimentFile {
        metadata: Metadata::new("simulate", cli.seed, echo(a, cli)),
        levels,
        n: a.n,
        report,
    };
    if out.wants(Format::Csv) {
        out.write("experiment.csv", &io::experiment_csv(&file)?)?;
    }
    if out.wants(Format::Json) {
        out.write("experiment.json", &io::to_json(&file)?)?;
    }
    Ok(())
}

fn cmd_generate(cli: &Cli, a: &GenerateArgs) -> Result<()> {
    if let Some(p) = &a.scenario {
        check_input(p)?;
    }
    let out = Output::prepare(cli)?;
    let sc = load_scenario(a.scenario.as_deref())?;
    let (d, _) = generate(&sc, a.n, cli.seed)?;
    let meta = Metadata::new("generate", cli.seed, echo(a, cli));
    out.write("data.csv", &io::dataset_csv(&d, &meta)?)
}
