//! Units, treatment arms, CSV ingestion and pooled standardization.
//!
//! A [`Dataset`] is immutable once built: every constructor validates the
//! arm structure (at least two levels, none empty), unique unit ids and a
//! shared finite covariate dimension.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A treatment level: its position in the ordered level list and its
/// external label.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TreatmentId {
    pub index: usize,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub id: String,
    /// Index into [`Dataset::levels`].
    pub treatment: usize,
    pub covariates: Vec<f64>,
    /// Response under the received treatment, when observed.
    pub response: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    units: Vec<Unit>,
    levels: Vec<TreatmentId>,
    covariate_names: Vec<String>,
    arms: Vec<Vec<usize>>,
    by_id: HashMap<String, usize>,
}

impl Dataset {
    pub fn new(units: Vec<Unit>, level_labels: Vec<String>, covariate_names: Vec<String>) -> Result<Self> {
        if level_labels.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "fewer than 2 treatment levels ({} found)",
                level_labels.len()
            )));
        }
        let mut seen = HashSet::new();
        for l in &level_labels {
            if !seen.insert(l.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate treatment label '{l}'")));
            }
        }
        if covariate_names.is_empty() {
            return Err(Error::InvalidInput("at least one covariate is required".into()));
        }
        let p = covariate_names.len();
        let k = level_labels.len();
        let mut arms = vec![Vec::new(); k];
        let mut by_id = HashMap::with_capacity(units.len());
        for (i, u) in units.iter().enumerate() {
            if u.treatment >= k {
                return Err(Error::InvalidInput(format!(
                    "unit '{}' has treatment index {} outside 0..{k}",
                    u.id, u.treatment
                )));
            }
            if u.covariates.len() != p {
                return Err(Error::DimensionMismatch {
                    expected: p,
                    got: u.covariates.len(),
                });
            }
            if let Some(j) = u.covariates.iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "unit '{}' has a non-finite value for covariate '{}'",
                    u.id, covariate_names[j]
                )));
            }
            if by_id.insert(u.id.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate unit id '{}'", u.id)));
            }
            arms[u.treatment].push(i);
        }
        if let Some(t) = arms.iter().position(Vec::is_empty) {
            return Err(Error::InvalidInput(format!(
                "treatment arm '{}' is empty",
                level_labels[t]
            )));
        }
        let levels = level_labels
            .into_iter()
            .enumerate()
            .map(|(index, label)| TreatmentId { index, label })
            .collect();
        Ok(Dataset {
            units,
            levels,
            covariate_names,
            arms,
            by_id,
        })
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    pub fn levels(&self) -> &[TreatmentId] {
        &self.levels
    }

    /// Number of treatment arms.
    pub fn k(&self) -> usize {
        self.levels.len()
    }

    /// Covariate dimension.
    pub fn p(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Positions (into [`Dataset::units`]) of the units that received `arm`.
    pub fn arm(&self, arm: usize) -> &[usize] {
        &self.arms[arm]
    }

    pub fn arm_sizes(&self) -> Vec<usize> {
        self.arms.iter().map(Vec::len).collect()
    }

    pub fn unit(&self, id: &str) -> Option<&Unit> {
        self.by_id.get(id).map(|&i| &self.units[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn level_index(&self, label: &str) -> Result<usize> {
        self.levels
            .iter()
            .position(|l| l.label == label)
            .ok_or_else(|| Error::InvalidInput(format!("unknown treatment level '{label}'")))
    }

    /// Empirical arm frequencies.
    pub fn arm_frequencies(&self) -> Vec<f64> {
        let n = self.units.len() as f64;
        self.arms.iter().map(|a| a.len() as f64 / n).collect()
    }

    /// Mean covariate vector over the given unit positions.
    pub fn covariate_mean(&self, positions: &[usize]) -> Vec<f64> {
        let mut mean = vec![0.0; self.p()];
        for &i in positions {
            for (m, v) in mean.iter_mut().zip(&self.units[i].covariates) {
                *m += v;
            }
        }
        let n = positions.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    /// Same units and arms with covariates replaced by `f(covariates)`.
    fn map_covariates(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Dataset {
        let units = self
            .units
            .iter()
            .map(|u| Unit {
                covariates: f(&u.covariates),
                ..u.clone()
            })
            .collect();
        Dataset {
            units,
            ..self.clone()
        }
    }
}

/// Column roles for [`load_csv`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub treatment_col: String,
    pub covariate_cols: Vec<String>,
    pub response_col: Option<String>,
    /// Unit id column; when absent ids are the 1-based data row numbers.
    pub id_col: Option<String>,
    /// Explicit level ordering; defaults to first-appearance order.
    pub level_order: Option<Vec<String>>,
}

/// Reads a header-led, comma-separated UTF-8 file. Lines starting with `#`
/// are ignored. Row numbers in errors count data rows from 1.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema)
}

pub fn read_csv<R: std::io::Read>(reader: R, schema: &CsvSchema) -> Result<Dataset> {
    if schema.covariate_cols.is_empty() {
        return Err(Error::Schema("no covariate columns given".into()));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column '{name}' not found in header")))
    };
    let t_col = col(&schema.treatment_col)?;
    let x_cols = schema
        .covariate_cols
        .iter()
        .map(|c| col(c))
        .collect::<Result<Vec<_>>>()?;
    let y_col = schema.response_col.as_deref().map(col).transpose()?;
    let id_col = schema.id_col.as_deref().map(col).transpose()?;

    let mut labels: Vec<String> = schema.level_order.clone().unwrap_or_default();
    let explicit = schema.level_order.is_some();
    let mut raw = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let label = field(t_col).to_string();
        if label.is_empty() {
            return Err(Error::Cell {
                row,
                column: schema.treatment_col.clone(),
                message: "missing treatment label".into(),
            });
        }
        let treatment = match labels.iter().position(|l| *l == label) {
            Some(t) => t,
            None if explicit => {
                return Err(Error::Cell {
                    row,
                    column: schema.treatment_col.clone(),
                    message: format!("level '{label}' is not in the supplied level order"),
                })
            }
            None => {
                labels.push(label);
                labels.len() - 1
            }
        };
        let mut covariates = Vec::with_capacity(x_cols.len());
        for (&c, name) in x_cols.iter().zip(&schema.covariate_cols) {
            covariates.push(parse_cell(field(c), row, name)?);
        }
        let response = match y_col {
            Some(c) if !field(c).is_empty() => {
                Some(parse_cell(field(c), row, schema.response_col.as_deref().unwrap_or(""))?)
            }
            _ => None,
        };
        let id = match id_col {
            Some(c) => field(c).to_string(),
            None => row.to_string(),
        };
        raw.push(Unit {
            id,
            treatment,
            covariates,
            response,
        });
    }
    Dataset::new(raw, labels, schema.covariate_cols.clone())
}

fn parse_cell(s: &str, row: usize, column: &str) -> Result<f64> {
    if s.is_empty() {
        return Err(Error::Cell {
            row,
            column: column.to_string(),
            message: "missing value".into(),
        });
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(_) => Err(Error::Cell {
            row,
            column: column.to_string(),
            message: format!("non-finite value '{s}'"),
        }),
        Err(_) => Err(Error::Cell {
            row,
            column: column.to_string(),
            message: format!("cannot parse '{s}' as a number"),
        }),
    }
}

/// Pooled per-covariate location and scale. Scale is the population
/// standard deviation (divisor n).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingParams {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl ScalingParams {
    pub const SD_CONVENTION: &'static str = "population (divisor n), pooled over all arms";

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.means.iter().zip(&self.sds))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.means.iter().zip(&self.sds))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

pub fn standardize(d: &Dataset) -> Result<(Dataset, ScalingParams)> {
    let n = d.units().len() as f64;
    let p = d.p();
    let mut means = vec![0.0; p];
    for u in d.units() {
        for (m, v) in means.iter_mut().zip(&u.covariates) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= n);
    let mut sds = vec![0.0; p];
    for u in d.units() {
        for ((s, v), m) in sds.iter_mut().zip(&u.covariates).zip(&means) {
            *s += (v - m) * (v - m);
        }
    }
    for (j, s) in sds.iter_mut().enumerate() {
        *s = (*s / n).sqrt();
        if !(*s > 0.0) || !s.is_finite() {
            return Err(Error::ConstantCovariate(d.covariate_names()[j].clone()));
        }
    }
    let params = ScalingParams { means, sds };
    Ok((d.map_covariates(|x| params.apply(x)), params))
}

pub fn unstandardize(d: &Dataset, params: &ScalingParams) -> Dataset {
    d.map_covariates(|z| params.invert(z))
}
