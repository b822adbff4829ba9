//! Principal-components reduction of score vectors.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PcaTarget {
    Dim(usize),
    /// Smallest dimension whose cumulative explained fraction reaches this.
    Variance(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaReduction {
    /// Retained components, one orthonormal row each.
    pub loadings: Vec<Vec<f64>>,
    /// Explained-variance fraction of every component, nonincreasing.
    pub explained: Vec<f64>,
    pub dim: usize,
    pub center: Vec<f64>,
}

impl PcaReduction {
    pub fn project(&self, row: &[f64]) -> Vec<f64> {
        self.loadings
            .iter()
            .map(|l| l.iter().zip(row.iter().zip(&self.center)).map(|(w, (v, c))| w * (v - c)).sum())
            .collect()
    }
}

/// Projects centered `scores` (n rows of length m) onto their leading
/// principal components.
pub fn reduce_scores_pca(scores: &[Vec<f64>], target: PcaTarget) -> Result<(PcaReduction, Vec<Vec<f64>>)> {
    let n = scores.len();
    if n < 2 {
        return Err(Error::InvalidInput("PCA needs at least 2 score rows".into()));
    }
    let m = scores[0].len();
    if m == 0 || scores.iter().any(|r| r.len() != m) {
        return Err(Error::InvalidInput("score rows must share a positive length".into()));
    }
    match target {
        PcaTarget::Dim(d) if d == 0 || d > m => {
            return Err(Error::InvalidInput(format!("target dimension {d} outside 1..={m}")))
        }
        PcaTarget::Variance(v) if !(v > 0.0 && v <= 1.0) => {
            return Err(Error::InvalidInput(format!("variance fraction {v} outside (0, 1]")))
        }
        _ => {}
    }
    let mut center = vec![0.0; m];
    for r in scores {
        for (c, v) in center.iter_mut().zip(r) {
            *c += v;
        }
    }
    center.iter_mut().for_each(|c| *c /= n as f64);
    let centered = DMatrix::from_fn(n, m, |i, j| scores[i][j] - center[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total: f64 = values.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Numeric("score matrix has zero total variance".into()));
    }
    let explained: Vec<f64> = values.iter().map(|v| v / total).collect();
    let dim = match target {
        PcaTarget::Dim(d) => d,
        PcaTarget::Variance(v) => {
            let mut cum = 0.0;
            explained
                .iter()
                .position(|f| {
                    cum += f;
                    cum >= v
                })
                .map_or(m, |i| i + 1)
        }
    };
    let loadings: Vec<Vec<f64>> = order[..dim]
        .iter()
        .map(|&i| {
            let col: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            // sign convention: largest-magnitude entry positive
            let lead = col.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
            let s = if lead < 0.0 { -1.0 } else { 1.0 } / norm;
            col.into_iter().map(|v| v * s).collect()
        })
        .collect();
    let red = PcaReduction {
        loadings,
        explained,
        dim,
        center,
    };
    let projected = scores.iter().map(|r| red.project(r)).collect();
    Ok((red, projected))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_one_scores() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
        let (red, proj) = reduce_scores_pca(&rows, PcaTarget::Variance(0.99)).unwrap();
        assert_eq!(red.dim, 1);
        assert!((red.explained[0] - 1.0).abs() < 1e-10);
        assert_eq!(proj[0].len(), 1);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(reduce_scores_pca(&[vec![1.0, 2.0]], PcaTarget::Dim(1)).is_err());
        assert!(reduce_scores_pca(&[vec![1.0], vec![2.0]], PcaTarget::Dim(2)).is_err());
        assert!(reduce_scores_pca(&[vec![1.0], vec![1.0]], PcaTarget::Dim(1)).is_err());
    }
}
