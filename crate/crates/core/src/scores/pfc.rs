//! Finite-grid checks of the posterior factorization (sufficiency) and
//! coarsest-balancing-score (minimality) criteria.
//!
//! For a pair of grid points the posterior ratio `q(t|x1)/q(t|x2)` is
//! "constant in t" when the spread of its logarithm over t is within `tol`;
//! two statistic values are "equal" when they agree entrywise within `tol`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViolationKind {
    /// Equal statistic but a t-dependent posterior ratio.
    Sufficiency,
    /// t-free posterior ratio but distinct statistic values.
    Coarseness,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfcViolation {
    pub kind: ViolationKind,
    /// Grid indices of the witness pair.
    pub pair: (usize, usize),
    pub stat_gap: f64,
    pub ratio_spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfcReport {
    pub sufficient: bool,
    pub coarsest: bool,
    pub violations: Vec<PfcViolation>,
}

impl PfcReport {
    /// Sufficient and minimal.
    pub fn holds(&self) -> bool {
        self.sufficient && self.coarsest
    }

    pub fn witness(&self, kind: ViolationKind) -> Option<&PfcViolation> {
        self.violations.iter().find(|v| v.kind == kind)
    }
}

/// `q_table[g][t]` is `q(t|x_g)`; `stats[g]` is the statistic at `x_g`.
pub fn check_pfc(q_table: &[Vec<f64>], stats: &[Vec<f64>], tol: f64) -> Result<PfcReport> {
    if q_table.len() != stats.len() {
        return Err(Error::DimensionMismatch {
            expected: q_table.len(),
            got: stats.len(),
        });
    }
    let k = q_table.first().map_or(0, Vec::len);
    for (g, row) in q_table.iter().enumerate() {
        if row.len() != k || k < 2 {
            return Err(Error::InvalidInput(format!("posterior row {g} has the wrong length")));
        }
        if row.iter().any(|q| !(*q > 0.0) || !q.is_finite()) {
            return Err(Error::InvalidInput(format!("posterior row {g} is not strictly positive")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > tol {
            return Err(Error::InvalidInput(format!("posterior row {g} sums to {s}, not 1")));
        }
    }
    let log_q: Vec<Vec<f64>> = q_table.iter().map(|r| r.iter().map(|q| q.ln()).collect()).collect();

    let mut violations = Vec::new();
    for a in 0..stats.len() {
        for b in a + 1..stats.len() {
            if stats[a].len() != stats[b].len() {
                return Err(Error::DimensionMismatch {
                    expected: stats[a].len(),
                    got: stats[b].len(),
                });
            }
            let stat_gap = stats[a]
                .iter()
                .zip(&stats[b])
                .map(|(u, v)| (u - v).abs())
                .fold(0.0, f64::max);
            let (lo, hi) = log_q[a]
                .iter()
                .zip(&log_q[b])
                .map(|(u, v)| u - v)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r), hi.max(r)));
            let ratio_spread = hi - lo;
            let same_stat = stat_gap <= tol;
            let flat_ratio = ratio_spread <= tol;
            let kind = match (same_stat, flat_ratio) {
                (true, false) => Some(ViolationKind::Sufficiency),
                (false, true) => Some(ViolationKind::Coarseness),
                _ => None,
            };
            if let Some(kind) = kind {
                violations.push(PfcViolation {
                    kind,
                    pair: (a, b),
                    stat_gap,
                    ratio_spread,
                });
            }
        }
    }
    Ok(PfcReport {
        sufficient: !violations.iter().any(|v| v.kind == ViolationKind::Sufficiency),
        coarsest: !violations.iter().any(|v| v.kind == ViolationKind::Coarseness),
        violations,
    })
}
