//! On-disk formats: score dumps, match files, effect and balance reports.
//!
//! CSV outputs begin with `#`-prefixed metadata lines (tool version, seed and
//! an echo of the run options); every reader here skips them. JSON outputs
//! carry the same information under a top-level `metadata` key. Floats are
//! written in shortest round-trip form so a dump reloads bit-exactly.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::effects::{BalanceReport, DoseResponseChain, EffectsReport};
use crate::error::{Error, Result};
use crate::matching::MatchingResult;
use crate::scores::{ScoreTable, ScoreVector};
use crate::simulation::ExperimentReport;

pub const TOOL: &str = "smatch";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    /// Options the run was invoked with.
    pub options: BTreeMap<String, String>,
}

impl Metadata {
    pub fn new(command: &str, seed: u64, options: BTreeMap<String, String>) -> Self {
        Metadata {
            tool: TOOL.into(),
            version: VERSION.into(),
            command: command.into(),
            seed,
            options,
        }
    }

    pub fn write_csv_header<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "# {} {}", self.tool, self.version)?;
        writeln!(w, "# command: {}", self.command)?;
        writeln!(w, "# seed: {}", self.seed)?;
        for (k, v) in &self.options {
            writeln!(w, "# {k}: {v}")?;
        }
        Ok(())
    }
}

fn csv_reader<R: std::io::Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(r)
}

fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn fmt_opt(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        "NA".into()
    }
}

/// Score dump: `id,pivot_label,s_log_1..s_log_{k-1}`; the non-pivot arms
/// follow ascending level order.
pub fn scores_csv(table: &ScoreTable, levels: &[String], meta: &Metadata) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    meta.write_csv_header(&mut out).expect("writing to memory");
    let others: Vec<&str> = levels
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != table.pivot())
        .map(|(_, l)| l.as_str())
        .collect();
    writeln!(out, "# score arms: {}", others.join(" ")).expect("writing to memory");
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["id".to_string(), "pivot_label".to_string()];
    header.extend((1..levels.len()).map(|i| format!("s_log_{i}")));
    w.write_record(&header)?;
    let pivot_label = &levels[table.pivot()];
    for (id, sv) in table.entries() {
        let mut rec = vec![id.clone(), pivot_label.clone()];
        rec.extend(sv.log_values.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| Error::Numeric(e.to_string()))
}

pub fn read_scores_csv(path: &Path, d: &Dataset) -> Result<ScoreTable> {
    let mut rdr = csv_reader(open(path)?);
    let headers = rdr.headers()?.clone();
    if headers.len() != d.k() + 1 || headers.get(0) != Some("id") || headers.get(1) != Some("pivot_label") {
        return Err(Error::Schema(format!(
            "score file must have columns id,pivot_label,s_log_1..s_log_{}",
            d.k() - 1
        )));
    }
    let mut pivot = None;
    let mut entries = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        let p = d.level_index(&rec[1])?;
        if *pivot.get_or_insert(p) != p {
            return Err(Error::Cell {
                row,
                column: "pivot_label".into(),
                message: "score file mixes pivots".into(),
            });
        }
        let vals = (2..rec.len())
            .map(|c| {
                rec[c].parse::<f64>().map_err(|_| Error::Cell {
                    row,
                    column: headers[c].to_string(),
                    message: format!("cannot parse '{}' as a number", &rec[c]),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        entries.push((rec[0].to_string(), ScoreVector::new(p, vals)?));
    }
    let pivot = pivot.ok_or_else(|| Error::InvalidInput("score file has no rows".into()))?;
    ScoreTable::from_entries(pivot, entries)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchFile {
    pub metadata: Metadata,
    pub levels: Vec<String>,
    /// Pivot chosen by best-set selection, when several were tried.
    pub selected_pivot: Option<String>,
    /// Best-set criterion per pivot label, when several were tried.
    #[serde(default)]
    pub pivot_criteria: BTreeMap<String, Option<f64>>,
    pub result: MatchingResult,
}

impl MatchFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Checks the file's level list against a dataset.
    pub fn check_levels(&self, d: &Dataset) -> Result<()> {
        let labels: Vec<&str> = d.levels().iter().map(|l| l.label.as_str()).collect();
        if labels != self.levels.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::InvalidInput(format!(
                "match file levels {:?} differ from dataset levels {:?}",
                self.levels, labels
            )));
        }
        Ok(())
    }
}

pub fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

/// Flat match table: `anchor_id,arm,match_id,distance`.
pub fn matches_csv(result: &MatchingResult, levels: &[String], meta: &Metadata) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    meta.write_csv_header(&mut out).expect("writing to memory");
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["anchor_id", "arm", "match_id", "distance"])?;
    for g in &result.groups {
        for a in &g.arms {
            for m in &a.matches {
                w.write_record([g.anchor.as_str(), levels[a.arm].as_str(), m.id.as_str(), &m.distance.to_string()])?;
            }
        }
    }
    w.into_inner().map_err(|e| Error::Numeric(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectsFile {
    pub metadata: Metadata,
    pub levels: Vec<String>,
    pub report: EffectsReport,
    pub chain: Option<DoseResponseChain>,
}

pub fn effects_csv(file: &EffectsFile) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    file.metadata.write_csv_header(&mut out).expect("writing to memory");
    if let Some(c) = &file.report.caveat {
        writeln!(out, "# caveat: {c}").expect("writing to memory");
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["pair", "estimate", "std_error", "n_groups", "kind"])?;
    let lv = &file.levels;
    let rows = file
        .report
        .estimates
        .iter()
        .map(|e| (e, "pairwise"))
        .chain(file.chain.iter().flat_map(|c| c.steps.iter().map(|e| (e, "dose_step"))));
    for (e, kind) in rows {
        w.write_record([
            format!("{}-{}", lv[e.pair.0], lv[e.pair.1]),
            e.estimate.to_string(),
            fmt_opt(e.std_error),
            e.n_groups.to_string(),
            kind.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Numeric(e.to_string()))
}

/// Long-format balance table: `covariate,arm_pair,phase,smd`.
pub fn balance_csv(report: &BalanceReport, d: &Dataset, meta: &Metadata) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    meta.write_csv_header(&mut out).expect("writing to memory");
    writeln!(out, "# convention: {}", report.convention).expect("writing to memory");
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["covariate", "arm_pair", "phase", "smd"])?;
    for e in &report.entries {
        let phase = match e.phase {
            crate::effects::Phase::Pre => "pre",
            crate::effects::Phase::Post => "post",
        };
        w.write_record([
            d.covariate_names()[e.covariate].clone(),
            format!("{}-{}", d.levels()[e.pair.0].label, d.levels()[e.pair.1].label),
            phase.to_string(),
            e.smd.map_or_else(|| "NA".to_string(), |v| v.to_string()),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Numeric(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentFile {
    pub metadata: Metadata,
    pub levels: Vec<String>,
    pub n: usize,
    pub report: ExperimentReport,
}

pub fn experiment_csv(file: &ExperimentFile) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    file.metadata.write_csv_header(&mut out).expect("writing to memory");
    writeln!(
        out,
        "# n: {} reps: {} completed: {} failed: {}",
        file.n, file.report.reps, file.report.completed, file.report.failed
    )
    .expect("writing to memory");
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "pair",
        "true_ate",
        "mean_estimate",
        "bias",
        "sd",
        "mc_se",
        "naive_mean",
        "naive_bias",
        "naive_sd",
        "naive_mc_se",
    ])?;
    let lv = &file.levels;
    for p in &file.report.pairs {
        w.write_record([
            format!("{}-{}", lv[p.pair.0], lv[p.pair.1]),
            p.true_ate.to_string(),
            p.mean_estimate.to_string(),
            p.bias.to_string(),
            fmt_opt(p.sd),
            fmt_opt(p.mc_se),
            p.naive_mean.to_string(),
            p.naive_bias.to_string(),
            fmt_opt(p.naive_sd),
            fmt_opt(p.naive_mc_se),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Numeric(e.to_string()))
}

/// Dataset as CSV (`id,treatment,x..,y`), e.g. for simulated data.
pub fn dataset_csv(d: &Dataset, meta: &Metadata) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    meta.write_csv_header(&mut out).expect("writing to memory");
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["id".to_string(), "treatment".to_string()];
    header.extend(d.covariate_names().iter().cloned());
    header.push("y".into());
    w.write_record(&header)?;
    for u in d.units() {
        let mut rec = vec![u.id.clone(), d.levels()[u.treatment].label.clone()];
        rec.extend(u.covariates.iter().map(|v| v.to_string()));
        rec.push(u.response.map_or_else(String::new, |v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| Error::Numeric(e.to_string()))
}
