//! Pairwise treatment-effect estimates from matched groups, dose chains and
//! covariate balance.
//!
//! Every estimate for a matching result is computed from the same groups, so
//! all pairwise contrasts are simultaneous: each group contributes one
//! response per arm (the anchor's own response, or the mean over its 1:k
//! matches), and the estimate for `(a, b)` is the unweighted mean over groups
//! of `r(a) - r(b)`.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::matching::MatchingResult;

pub const REUSE_CAVEAT: &str =
    "standard errors treat per-group differences as independent; matching with replacement reuses units";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    /// `(a, b)`: the estimate is of `E{r(a) - r(b)}`.
    pub pair: (usize, usize),
    pub estimate: f64,
    /// Sample sd of per-group differences over `sqrt(n_groups)`; NaN for a
    /// single group.
    pub std_error: f64,
    pub n_groups: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectsReport {
    pub estimates: Vec<EffectEstimate>,
    pub caveat: Option<String>,
}

/// Per-group responses, `[group][arm]`, groups in anchor-id order.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupResponses {
    rows: Vec<Vec<f64>>,
    k: usize,
}

fn response_of(d: &Dataset, id: &str) -> Result<f64> {
    d.unit(id)
        .ok_or_else(|| Error::InvalidInput(format!("matched unit '{id}' is not in the dataset")))?
        .response
        .ok_or_else(|| Error::MissingResponse(id.to_string()))
}

impl GroupResponses {
    pub fn collect(result: &MatchingResult, d: &Dataset) -> Result<Self> {
        if result.groups.is_empty() {
            return Err(Error::NothingMatched);
        }
        let k = d.k();
        let anchor_arm = result.spec.anchor_arm;
        // A fixed summation order makes estimates independent of group order.
        let mut groups: Vec<_> = result.groups.iter().collect();
        groups.sort_by(|a, b| a.anchor.cmp(&b.anchor));
        let rows = groups
            .into_iter()
            .map(|g| {
                let mut row = vec![f64::NAN; k];
                row[anchor_arm] = response_of(d, &g.anchor)?;
                for a in &g.arms {
                    let mut sum = 0.0;
                    for m in &a.matches {
                        sum += response_of(d, &m.id)?;
                    }
                    row[a.arm] = sum / a.matches.len() as f64;
                }
                if row.iter().any(|v| v.is_nan()) {
                    return Err(Error::InvalidInput(format!("group of anchor '{}' does not span every arm", g.anchor)));
                }
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GroupResponses { rows, k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_groups(&self) -> usize {
        self.rows.len()
    }

    /// Mean over groups of `r(a) - r(b)`.
    pub fn estimate(&self, a: usize, b: usize) -> EffectEstimate {
        let diffs: Vec<f64> = self.rows.iter().map(|r| r[a] - r[b]).collect();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let std_error = if diffs.len() > 1 {
            let ss: f64 = diffs.iter().map(|v| (v - mean) * (v - mean)).sum();
            (ss / (n - 1.0)).sqrt() / n.sqrt()
        } else {
            f64::NAN
        };
        EffectEstimate {
            pair: (a, b),
            estimate: mean,
            std_error,
            n_groups: diffs.len(),
        }
    }
}

/// All unordered pairs, reported as `(b, a)` with `b > a`, i.e.
/// `E{r(t_b) - r(t_a)}` with the later level first.
pub fn estimate_pairwise(result: &MatchingResult, d: &Dataset) -> Result<EffectsReport> {
    let g = GroupResponses::collect(result, d)?;
    let mut estimates = Vec::new();
    for a in 0..g.k() {
        for b in a + 1..g.k() {
            estimates.push(g.estimate(b, a));
        }
    }
    Ok(EffectsReport {
        estimates,
        caveat: result.spec.with_replacement.then(|| REUSE_CAVEAT.to_string()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseResponseChain {
    /// Levels in increasing dose order.
    pub levels: Vec<usize>,
    /// `E{r(levels[i+1]) - r(levels[i])}` for consecutive levels.
    pub steps: Vec<EffectEstimate>,
}

pub fn dose_chain(result: &MatchingResult, d: &Dataset, dose_order: &[usize]) -> Result<DoseResponseChain> {
    let mut sorted = dose_order.to_vec();
    sorted.sort_unstable();
    if sorted != (0..d.k()).collect::<Vec<_>>() {
        return Err(Error::InvalidInput("dose order must be a permutation of the treatment levels".into()));
    }
    let g = GroupResponses::collect(result, d)?;
    let steps = dose_order.windows(2).map(|w| g.estimate(w[1], w[0])).collect();
    Ok(DoseResponseChain {
        levels: dose_order.to_vec(),
        steps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pre,
    Post,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceEntry {
    pub covariate: usize,
    /// `(a, b)` with `a < b`; SMD is `(mean_a - mean_b) / pooled sd`.
    pub pair: (usize, usize),
    pub phase: Phase,
    /// `None` when undefined (zero pooled sd with unequal means).
    pub smd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub entries: Vec<BalanceEntry>,
    pub convention: String,
}

impl BalanceReport {
    pub const CONVENTION: &'static str =
        "smd = (mean_a - mean_b) / sqrt((sd_a^2 + sd_b^2) / 2), a < b; sds are pre-match sample sds (n-1); post-match means count matched units with multiplicity";

    /// Largest finite |SMD| for one covariate and phase over all arm pairs.
    pub fn max_abs(&self, covariate: usize, phase: Phase) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.covariate == covariate && e.phase == phase)
            .filter_map(|e| e.smd)
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest finite |SMD| over every covariate and pair in one phase.
    pub fn max_abs_overall(&self, phase: Phase) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.phase == phase)
            .filter_map(|e| e.smd)
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn moments(rows: &[&[f64]], p: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; p];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; p];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let denom = (n - 1.0).max(1.0);
    var.iter_mut().for_each(|s| *s /= denom);
    (mean, var)
}

#[allow(clippy::needless_range_loop)]
pub fn balance_report(d: &Dataset, result: &MatchingResult) -> Result<BalanceReport> {
    if result.groups.is_empty() {
        return Err(Error::NothingMatched);
    }
    let k = d.k();
    let p = d.p();
    let cov = |id: &str| -> Result<&[f64]> {
        d.unit(id)
            .map(|u| u.covariates.as_slice())
            .ok_or_else(|| Error::InvalidInput(format!("matched unit '{id}' is not in the dataset")))
    };
    let pre_rows: Vec<Vec<&[f64]>> = (0..k)
        .map(|t| d.arm(t).iter().map(|&i| d.units()[i].covariates.as_slice()).collect())
        .collect();
    let mut post_rows: Vec<Vec<&[f64]>> = vec![Vec::new(); k];
    let mut groups: Vec<_> = result.groups.iter().collect();
    groups.sort_by(|x, y| x.anchor.cmp(&y.anchor));
    for g in groups {
        post_rows[result.spec.anchor_arm].push(cov(&g.anchor)?);
        for a in &g.arms {
            for m in &a.matches {
                post_rows[a.arm].push(cov(&m.id)?);
            }
        }
    }
    let pre: Vec<(Vec<f64>, Vec<f64>)> = pre_rows.iter().map(|r| moments(r, p)).collect();
    let post_means: Vec<Vec<f64>> = post_rows.iter().map(|r| moments(r, p).0).collect();

    let smd = |diff: f64, pooled: f64| -> Option<f64> {
        if pooled > 0.0 {
            Some(diff / pooled)
        } else if diff == 0.0 {
            Some(0.0)
        } else {
            None
        }
    };
    let mut entries = Vec::new();
    for c in 0..p {
        for a in 0..k {
            for b in a + 1..k {
                let pooled = ((pre[a].1[c] + pre[b].1[c]) / 2.0).sqrt();
                entries.push(BalanceEntry {
                    covariate: c,
                    pair: (a, b),
                    phase: Phase::Pre,
                    smd: smd(pre[a].0[c] - pre[b].0[c], pooled),
                });
                entries.push(BalanceEntry {
                    covariate: c,
                    pair: (a, b),
                    phase: Phase::Post,
                    smd: smd(post_means[a][c] - post_means[b][c], pooled),
                });
            }
        }
    }
    Ok(BalanceReport {
        entries,
        convention: BalanceReport::CONVENTION.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Unit;
    use crate::matching::{match_units, MatchSpec};
    use crate::scores::{ScoreTable, ScoreVector};

    /// Three arms, every covariate value present in each arm, r(t) = x + t*1.5.
    fn exact_instance() -> (Dataset, MatchingResult) {
        let xs = [-1.0, 0.0, 0.5, 2.0];
        let mut units = Vec::new();
        let mut entries = Vec::new();
        for t in 0..3 {
            for (i, &x) in xs.iter().enumerate() {
                let id = format!("t{t}u{i}");
                units.push(Unit {
                    id: id.clone(),
                    treatment: t,
                    covariates: vec![x, x * x],
                    response: Some(x + 1.5 * t as f64),
                });
                entries.push((id, ScoreVector::new(0, vec![x, 2.0 * x]).unwrap()));
            }
        }
        let d = Dataset::new(units, vec!["a".into(), "b".into(), "c".into()], vec!["x".into(), "x2".into()]).unwrap();
        let s = ScoreTable::from_entries(0, entries).unwrap();
        let r = match_units(&d, &s, &MatchSpec::new(0)).unwrap();
        (d, r)
    }

    #[test]
    fn constant_effect_exact() {
        let (d, r) = exact_instance();
        let rep = estimate_pairwise(&r, &d).unwrap();
        let e10 = rep.estimates.iter().find(|e| e.pair == (1, 0)).unwrap();
        assert_eq!(e10.estimate, 1.5);
        assert_eq!(e10.std_error, 0.0);
        assert_eq!(e10.n_groups, 4);
        assert!(rep.caveat.is_some());
    }

    #[test]
    fn antisymmetry_and_telescoping() {
        let (d, r) = exact_instance();
        let g = GroupResponses::collect(&r, &d).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                assert_eq!(g.estimate(a, b).estimate, -g.estimate(b, a).estimate);
            }
        }
        let chain = dose_chain(&r, &d, &[0, 1, 2]).unwrap();
        let total = g.estimate(2, 0).estimate;
        assert_eq!(chain.steps[0].estimate + chain.steps[1].estimate, total);
    }

    #[test]
    fn exact_matches_balance_perfectly() {
        let (d, r) = exact_instance();
        let b = balance_report(&d, &r).unwrap();
        assert!(b.entries.iter().filter(|e| e.phase == Phase::Post).all(|e| e.smd == Some(0.0)));
    }

    #[test]
    fn missing_response_names_unit() {
        let (d, r) = exact_instance();
        let units = d
            .units()
            .iter()
            .map(|u| Unit {
                response: if u.id == "t2u1" { None } else { u.response },
                ..u.clone()
            })
            .collect();
        let d2 = Dataset::new(units, vec!["a".into(), "b".into(), "c".into()], d.covariate_names().to_vec()).unwrap();
        match estimate_pairwise(&r, &d2) {
            Err(Error::MissingResponse(id)) => assert_eq!(id, "t2u1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_result_rejected() {
        let (d, mut r) = exact_instance();
        r.groups.clear();
        assert!(matches!(estimate_pairwise(&r, &d), Err(Error::NothingMatched)));
        assert!(matches!(balance_report(&d, &r), Err(Error::NothingMatched)));
        assert!(dose_chain(&exact_instance().1, &d, &[0, 0, 1]).is_err());
    }
}
