//! Log likelihood-ratio score vectors and the models that produce them.
//!
//! A score under pivot `j` holds, for every other arm `i` in ascending arm
//! order, `log p(x|t_i) - log p(x|t_j)`. Scores are kept on the log scale;
//! the map is a bijection of the ratio vector, so "equal score" level sets
//! are unchanged.

mod known;
mod logit;
mod pfc;
pub mod quadrature;

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};

pub use known::{DensitySpec, KnownDensityModel, Monomial, NormalArm, Polynomial, PolynomialArm};
pub use logit::{fit_multinomial_logit, FitInfo, LogitFitOptions, LogitObjective, MultinomialLogitModel};
pub use pfc::{check_pfc, PfcReport, PfcViolation, ViolationKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub pivot: usize,
    pub log_values: Vec<f64>,
}

impl ScoreVector {
    pub fn new(pivot: usize, log_values: Vec<f64>) -> Result<Self> {
        if pivot > log_values.len() {
            return Err(Error::InvalidInput(format!(
                "pivot {pivot} out of range for {} arms",
                log_values.len() + 1
            )));
        }
        if log_values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("score vector has non-finite entries".into()));
        }
        Ok(ScoreVector { pivot, log_values })
    }

    /// Builds the score from per-arm log quantities that share an unknown
    /// additive constant (log densities, log posteriors, linear predictors).
    pub fn from_arm_logs(pivot: usize, arm_logs: &[f64]) -> Result<Self> {
        let base = arm_logs[pivot];
        let log_values = arm_logs
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != pivot)
            .map(|(_, v)| v - base)
            .collect();
        ScoreVector::new(pivot, log_values)
    }

    /// Number of arms.
    pub fn k(&self) -> usize {
        self.log_values.len() + 1
    }

    /// Log ratio of `arm` against the pivot; zero for the pivot itself.
    pub fn entry(&self, arm: usize) -> f64 {
        match arm.cmp(&self.pivot) {
            std::cmp::Ordering::Less => self.log_values[arm],
            std::cmp::Ordering::Equal => 0.0,
            std::cmp::Ordering::Greater => self.log_values[arm - 1],
        }
    }

    /// Length-k vector with a zero in the pivot slot.
    pub fn full(&self) -> Vec<f64> {
        (0..self.k()).map(|a| self.entry(a)).collect()
    }

    /// Re-expresses the score against `new_pivot`: entry `i` becomes
    /// `old(i) - old(new_pivot)`.
    pub fn pivot_transform(&self, new_pivot: usize) -> Result<ScoreVector> {
        if new_pivot >= self.k() {
            return Err(Error::InvalidInput(format!(
                "pivot {new_pivot} out of range for {} arms",
                self.k()
            )));
        }
        if new_pivot == self.pivot {
            return Ok(self.clone());
        }
        let shift = self.entry(new_pivot);
        let log_values = (0..self.k())
            .filter(|&a| a != new_pivot)
            .map(|a| self.entry(a) - shift)
            .collect();
        Ok(ScoreVector {
            pivot: new_pivot,
            log_values,
        })
    }

    /// Entries mapped back to the ratio scale.
    pub fn ratios(&self) -> Vec<f64> {
        self.log_values.iter().map(|v| v.exp()).collect()
    }
}

/// Prior arm probabilities `pi_T(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorWeights(Vec<f64>);

impl PriorWeights {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidInput("prior weights must be nonnegative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!("prior weights sum to {total}, not 1")));
        }
        Ok(PriorWeights(probs))
    }

    pub fn uniform(k: usize) -> Self {
        PriorWeights(vec![1.0 / k as f64; k])
    }

    /// Empirical arm frequencies of a dataset.
    pub fn empirical(d: &Dataset) -> Self {
        PriorWeights(d.arm_frequencies())
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }
}

/// Anything that maps a covariate vector to a score vector under a pivot.
pub trait ScoreModel: Sync {
    fn num_arms(&self) -> usize;

    fn dim(&self) -> usize;

    fn score(&self, x: &[f64], pivot: usize) -> Result<ScoreVector>;
}

/// Propensity of arm 1 (index 0) for a two-arm score with pivot arm 1:
/// `pi_1 / (pi_1 + pi_2 * exp(log_value))`.
pub fn binary_propensity(sv: &ScoreVector, priors: &PriorWeights) -> Result<f64> {
    if sv.k() != 2 || priors.probs().len() != 2 {
        return Err(Error::InvalidInput(format!(
            "binary propensity needs exactly 2 arms, got {}",
            sv.k()
        )));
    }
    if sv.pivot != 0 {
        return Err(Error::InvalidInput("binary propensity needs pivot at the first arm".into()));
    }
    let (p1, p2) = (priors.probs()[0], priors.probs()[1]);
    let logit = p1.ln() - p2.ln() - sv.log_values[0];
    Ok(if logit >= 0.0 {
        1.0 / (1.0 + (-logit).exp())
    } else {
        let e = logit.exp();
        e / (1.0 + e)
    })
}

/// Scores for every unit of a dataset under one pivot, in dataset order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pivot: usize,
    entries: Vec<(String, ScoreVector)>,
    index: HashMap<String, usize>,
}

impl ScoreTable {
    pub fn from_entries(pivot: usize, entries: Vec<(String, ScoreVector)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        let k = entries.first().map(|(_, s)| s.k());
        for (i, (id, s)) in entries.iter().enumerate() {
            if s.pivot != pivot {
                return Err(Error::InvalidInput(format!(
                    "score for '{id}' has pivot {} but the table pivot is {pivot}",
                    s.pivot
                )));
            }
            if Some(s.k()) != k {
                return Err(Error::InvalidInput(format!("score for '{id}' has the wrong length")));
            }
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate score id '{id}'")));
            }
        }
        Ok(ScoreTable { pivot, entries, index })
    }

    /// Evaluates `model` on every unit. Evaluation runs in parallel; the
    /// output order is the dataset order regardless of schedule.
    pub fn from_model<M: ScoreModel + ?Sized>(model: &M, d: &Dataset, pivot: usize) -> Result<Self> {
        if model.num_arms() != d.k() {
            return Err(Error::DimensionMismatch {
                expected: d.k(),
                got: model.num_arms(),
            });
        }
        let entries = d
            .units()
            .par_iter()
            .map(|u| Ok((u.id.clone(), model.score(&u.covariates, pivot)?)))
            .collect::<Result<Vec<_>>>()?;
        ScoreTable::from_entries(pivot, entries)
    }

    pub fn pivot(&self) -> usize {
        self.pivot
    }

    pub fn entries(&self) -> &[(String, ScoreVector)] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&ScoreVector> {
        self.index.get(id).map(|&i| &self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn transform(&self, new_pivot: usize) -> Result<ScoreTable> {
        let entries = self
            .entries
            .iter()
            .map(|(id, s)| Ok((id.clone(), s.pivot_transform(new_pivot)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ScoreTable {
            pivot: new_pivot,
            entries,
            index: self.index.clone(),
        })
    }
}
