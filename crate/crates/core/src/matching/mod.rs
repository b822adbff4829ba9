//! Nearest-neighbour matching of units across arms on score vectors.
//!
//! Every anchor from the anchor arm receives, from each other arm, the
//! `neighbors_per_arm` units minimising the squared Euclidean distance
//! between score vectors. Ties go to the lexicographically smaller unit id.
//! A group is kept only when every arm supplies its full quota within the
//! caliper.

mod kdtree;
mod pca;

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::scores::ScoreTable;

pub use kdtree::{scan_nearest, KdTree};
pub use pca::{reduce_scores_pca, PcaReduction, PcaTarget};

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Euclidean distance between log-ratio vectors.
    Log,
    /// Euclidean distance between ratio vectors.
    Ratio,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    /// Exhaustive scan over the candidate pool.
    Scan,
    KdTree,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSpec {
    pub pivot: usize,
    pub anchor_arm: usize,
    pub neighbors_per_arm: usize,
    pub with_replacement: bool,
    /// Largest admissible squared distance.
    pub caliper: Option<f64>,
    pub metric: Metric,
    pub search: SearchMode,
}

impl MatchSpec {
    /// 1:1 matching with replacement, anchors from the pivot arm.
    pub fn new(pivot: usize) -> Self {
        MatchSpec {
            pivot,
            anchor_arm: pivot,
            neighbors_per_arm: 1,
            with_replacement: true,
            caliper: None,
            metric: Metric::Log,
            search: SearchMode::KdTree,
        }
    }

    fn validate(&self, k: usize) -> Result<()> {
        if self.pivot >= k || self.anchor_arm >= k {
            return Err(Error::InvalidInput("pivot or anchor arm out of range".into()));
        }
        if self.neighbors_per_arm == 0 {
            return Err(Error::InvalidInput("neighbors per arm must be at least 1".into()));
        }
        if let Some(c) = self.caliper {
            if !(c >= 0.0) {
                return Err(Error::InvalidInput("caliper must be nonnegative".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub id: String,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmMatches {
    pub arm: usize,
    /// Ascending by distance.
    pub matches: Vec<Match>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedGroup {
    pub anchor: String,
    /// One entry per non-anchor arm, ascending arm order.
    pub arms: Vec<ArmMatches>,
}

impl MatchedGroup {
    pub fn arm(&self, arm: usize) -> Option<&ArmMatches> {
        self.arms.iter().find(|a| a.arm == arm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnmatchedReason {
    Caliper,
    PoolExhausted,
}

impl UnmatchedReason {
    pub fn as_str(self) -> &'static str {
        match self {
            UnmatchedReason::Caliper => "caliper",
            UnmatchedReason::PoolExhausted => "pool exhausted",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unmatched {
    pub anchor: String,
    pub reason: UnmatchedReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmUsage {
    pub arm: usize,
    pub total_matches: usize,
    pub distinct_units: usize,
    pub max_reuse: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingResult {
    pub groups: Vec<MatchedGroup>,
    pub unmatched: Vec<Unmatched>,
    pub spec: MatchSpec,
    pub summary: Vec<ArmUsage>,
}

/// Candidate pool of one arm, ordered by unit id.
struct Pool<'a> {
    arm: usize,
    ids: Vec<&'a str>,
    points: Vec<Vec<f64>>,
    tree: Option<KdTree>,
}

impl Pool<'_> {
    fn nearest<F: Fn(usize) -> bool>(&self, q: &[f64], k: usize, allowed: F) -> Vec<(f64, usize)> {
        match &self.tree {
            Some(t) => t.nearest(q, k, allowed),
            None => scan_nearest(&self.points, q, k, allowed),
        }
    }
}

fn coordinates(scores: &ScoreTable, id: &str, metric: Metric) -> Result<Vec<f64>> {
    let sv = scores.get(id).ok_or_else(|| Error::MissingScore(id.to_string()))?;
    Ok(match metric {
        Metric::Log => sv.log_values.clone(),
        Metric::Ratio => sv.ratios(),
    })
}

type Outcome = std::result::Result<Vec<ArmMatches>, UnmatchedReason>;

fn assemble(pools: &[Pool<'_>], found: Vec<Vec<(f64, usize)>>, spec: &MatchSpec) -> Outcome {
    if found.iter().any(|f| f.len() < spec.neighbors_per_arm) {
        return Err(UnmatchedReason::PoolExhausted);
    }
    if let Some(c) = spec.caliper {
        if found.iter().flatten().any(|(d, _)| *d > c) {
            return Err(UnmatchedReason::Caliper);
        }
    }
    Ok(pools
        .iter()
        .zip(found)
        .map(|(pool, f)| ArmMatches {
            arm: pool.arm,
            matches: f
                .into_iter()
                .map(|(distance, j)| Match {
                    id: pool.ids[j].to_string(),
                    distance,
                })
                .collect(),
        })
        .collect())
}

pub fn match_units(d: &Dataset, scores: &ScoreTable, spec: &MatchSpec) -> Result<MatchingResult> {
    spec.validate(d.k())?;
    if scores.pivot() != spec.pivot {
        return Err(Error::InvalidInput(format!(
            "scores use pivot {} but the match spec asks for {}",
            scores.pivot(),
            spec.pivot
        )));
    }
    let mut pools = Vec::with_capacity(d.k() - 1);
    for arm in (0..d.k()).filter(|&a| a != spec.anchor_arm) {
        let mut ids: Vec<&str> = d.arm(arm).iter().map(|&i| d.units()[i].id.as_str()).collect();
        ids.sort_unstable();
        let points = ids
            .iter()
            .map(|id| coordinates(scores, id, spec.metric))
            .collect::<Result<Vec<_>>>()?;
        let tree = (spec.search == SearchMode::KdTree).then(|| KdTree::build(points.clone()));
        pools.push(Pool { arm, ids, points, tree });
    }
    let anchors: Vec<(&str, Vec<f64>)> = d
        .arm(spec.anchor_arm)
        .iter()
        .map(|&i| {
            let id = d.units()[i].id.as_str();
            Ok((id, coordinates(scores, id, spec.metric)?))
        })
        .collect::<Result<_>>()?;
    let k = spec.neighbors_per_arm;

    let outcomes: Vec<Outcome> = if spec.with_replacement {
        anchors
            .par_iter()
            .map(|(_, q)| {
                let found = pools.iter().map(|p| p.nearest(q, k, |_| true)).collect();
                assemble(&pools, found, spec)
            })
            .collect()
    } else {
        // Greedy: anchors in ascending order of their provisional (full-pool)
        // worst nearest distance, ties by anchor id.
        let provisional: Vec<f64> = anchors
            .par_iter()
            .map(|(_, q)| {
                pools
                    .iter()
                    .map(|p| p.nearest(q, 1, |_| true).first().map_or(f64::INFINITY, |c| c.0))
                    .fold(0.0, f64::max)
            })
            .collect();
        let mut order: Vec<usize> = (0..anchors.len()).collect();
        order.sort_by(|&a, &b| {
            provisional[a]
                .total_cmp(&provisional[b])
                .then_with(|| anchors[a].0.cmp(anchors[b].0))
        });
        let mut used: Vec<Vec<bool>> = pools.iter().map(|p| vec![false; p.ids.len()]).collect();
        let mut out: Vec<Option<Outcome>> = vec![None; anchors.len()];
        for a in order {
            let q = &anchors[a].1;
            let found: Vec<Vec<(f64, usize)>> = pools
                .iter()
                .zip(&used)
                .map(|(p, u)| p.nearest(q, k, |j| !u[j]))
                .collect();
            let chosen: Vec<Vec<usize>> = found.iter().map(|f| f.iter().map(|c| c.1).collect()).collect();
            let outcome = assemble(&pools, found, spec);
            if outcome.is_ok() {
                for (u, js) in used.iter_mut().zip(chosen) {
                    js.into_iter().for_each(|j| u[j] = true);
                }
            }
            out[a] = Some(outcome);
        }
        out.into_iter().map(|o| o.expect("every anchor processed")).collect()
    };

    let mut groups = Vec::new();
    let mut unmatched = Vec::new();
    for ((id, _), outcome) in anchors.iter().zip(outcomes) {
        match outcome {
            Ok(arms) => groups.push(MatchedGroup {
                anchor: id.to_string(),
                arms,
            }),
            Err(reason) => unmatched.push(Unmatched {
                anchor: id.to_string(),
                reason,
            }),
        }
    }
    let summary = pools
        .iter()
        .map(|p| {
            let mut counts: HashMap<&str, usize> = HashMap::new();
            for g in &groups {
                for m in &g.arm(p.arm).expect("every group spans every arm").matches {
                    *counts.entry(m.id.as_str()).or_default() += 1;
                }
            }
            ArmUsage {
                arm: p.arm,
                total_matches: counts.values().sum(),
                distinct_units: counts.len(),
                max_reuse: counts.values().copied().max().unwrap_or(0),
            }
        })
        .collect();
    Ok(MatchingResult {
        groups,
        unmatched,
        spec: spec.clone(),
        summary,
    })
}

/// One matching per pivot, anchor arm held fixed at `spec.anchor_arm`.
pub fn match_all_pivots<F>(d: &Dataset, score_provider: F, spec: &MatchSpec) -> Result<Vec<(usize, MatchingResult)>>
where
    F: Fn(usize) -> Result<ScoreTable>,
{
    (0..d.k())
        .map(|pivot| {
            let scores = score_provider(pivot)?;
            let spec = MatchSpec { pivot, ..spec.clone() };
            Ok((pivot, match_units(d, &scores, &spec)?))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanNorm {
    Euclidean,
    Sup,
}

/// Distance between the mean covariates of all matched (non-anchor) units,
/// counted with multiplicity, and the anchor-arm covariate mean. `None` when
/// nothing matched.
pub fn pivot_criterion(result: &MatchingResult, d: &Dataset, norm: MeanNorm) -> Result<Option<f64>> {
    if result.groups.is_empty() {
        return Ok(None);
    }
    let mut positions = Vec::new();
    for g in &result.groups {
        for a in &g.arms {
            for m in &a.matches {
                positions.push(d.position(&m.id).ok_or_else(|| {
                    Error::InvalidInput(format!("matched unit '{}' is not in the dataset", m.id))
                })?);
            }
        }
    }
    let matched = d.covariate_mean(&positions);
    let anchor = d.covariate_mean(d.arm(result.spec.anchor_arm));
    let diffs = matched.iter().zip(&anchor).map(|(a, b)| (a - b).abs());
    Ok(Some(match norm {
        MeanNorm::Euclidean => diffs.map(|v| v * v).sum::<f64>().sqrt(),
        MeanNorm::Sup => diffs.fold(0.0, f64::max),
    }))
}

/// The result whose matched covariate means sit nearest the anchor-arm
/// means; ties go to the smaller pivot index.
pub fn select_best_pivot<'a>(
    results: &'a [(usize, MatchingResult)],
    d: &Dataset,
    norm: MeanNorm,
) -> Result<(usize, &'a MatchingResult)> {
    if results.is_empty() {
        return Err(Error::InvalidInput("no matching results to choose from".into()));
    }
    let anchor = results[0].1.spec.anchor_arm;
    if results.iter().any(|(_, r)| r.spec.anchor_arm != anchor) {
        return Err(Error::InvalidInput("results do not share an anchor arm".into()));
    }
    let mut best: Option<(usize, f64, &MatchingResult)> = None;
    for (pivot, r) in results {
        if let Some(c) = pivot_criterion(r, d, norm)? {
            let better = match best {
                None => true,
                Some((bp, bc, _)) => c < bc || (c == bc && *pivot < bp),
            };
            if better {
                best = Some((*pivot, c, r));
            }
        }
    }
    best.map(|(p, _, r)| (p, r)).ok_or(Error::NothingMatched)
}
