//! Direct density-ratio estimation by least-squares fitting of a
//! nonnegative kernel expansion (uLSIF-style).
//!
//! The ratio `r(x) = p_num(x) / p_den(x)` is modelled as
//! `sum_l alpha_l phi_l(x)` with Gaussian kernels centred on a seeded subsample
//! of the numerator sample. The coefficients minimise the empirical squared
//! error `1/2 a'Ha - h'a + lambda/2 |a|^2`, which has the closed form
//! `(H + lambda I) a = h`; negative coefficients are clamped to zero.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, TreatmentId};
use crate::error::{Error, Result};
use crate::scores::{ScoreModel, ScoreVector};

/// Floor applied before taking the log of an estimated ratio.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    Gaussian,
    /// A single basis function `phi = 1`.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityRatioModel {
    pub basis: BasisKind,
    pub centers: Vec<Vec<f64>>,
    pub bandwidth: f64,
    pub coefficients: Vec<f64>,
    pub ridge: f64,
    pub numerator_arm: Option<TreatmentId>,
    pub denominator_arm: Option<TreatmentId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisConfig {
    pub max_centers: usize,
    pub bandwidth_grid: Vec<f64>,
    pub ridge_grid: Vec<f64>,
    pub folds: usize,
    pub seed: u64,
}

impl Default for BasisConfig {
    fn default() -> Self {
        BasisConfig {
            max_centers: 100,
            bandwidth_grid: vec![0.1, 0.2, 0.3, 0.5, 0.7, 1.0, 1.5, 2.0, 3.0],
            ridge_grid: vec![1e-3, 1e-2, 1e-1, 1.0],
            folds: 5,
            seed: 0,
        }
    }
}

impl BasisConfig {
    fn validate(&self) -> Result<()> {
        if self.bandwidth_grid.is_empty() || self.ridge_grid.is_empty() {
            return Err(Error::InvalidInput("bandwidth and ridge grids must be non-empty".into()));
        }
        if self.bandwidth_grid.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidInput("bandwidths must be positive and finite".into()));
        }
        if self.ridge_grid.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::InvalidInput("ridge values must be nonnegative".into()));
        }
        if self.folds < 2 {
            return Err(Error::InvalidInput("cross-validation needs at least 2 folds".into()));
        }
        if self.max_centers == 0 {
            return Err(Error::InvalidInput("max_centers must be positive".into()));
        }
        Ok(())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

fn features(basis: BasisKind, centers: &[Vec<f64>], bandwidth: f64, x: &[f64]) -> Vec<f64> {
    match basis {
        BasisKind::Constant => vec![1.0],
        BasisKind::Gaussian => {
            let denom = 2.0 * bandwidth * bandwidth;
            centers.iter().map(|c| (-sq_dist(x, c) / denom).exp()).collect()
        }
    }
}

impl DensityRatioModel {
    pub fn dim(&self) -> Option<usize> {
        self.centers.first().map(Vec::len)
    }

    pub fn predict_ratio(&self, x: &[f64]) -> Result<f64> {
        if let Some(p) = self.dim() {
            if p != x.len() {
                return Err(Error::DimensionMismatch { expected: p, got: x.len() });
            }
        }
        let phi = features(self.basis, &self.centers, self.bandwidth, x);
        Ok(phi.iter().zip(&self.coefficients).map(|(f, a)| f * a).sum::<f64>().max(0.0))
    }

    /// `log(max(r(x), LOG_FLOOR))`.
    pub fn log_ratio(&self, x: &[f64]) -> Result<f64> {
        Ok(self.predict_ratio(x)?.max(LOG_FLOOR).ln())
    }
}

/// The empirical quadratic program `(H, h)` for one basis.
#[derive(Debug, Clone)]
pub struct RatioSystem {
    pub h_mat: DMatrix<f64>,
    pub h_vec: DVector<f64>,
}

impl RatioSystem {
    pub fn build(
        numerator: &[Vec<f64>],
        denominator: &[Vec<f64>],
        basis: BasisKind,
        centers: &[Vec<f64>],
        bandwidth: f64,
    ) -> Result<Self> {
        if numerator.is_empty() || denominator.is_empty() {
            return Err(Error::InvalidInput("ratio fitting needs non-empty samples".into()));
        }
        let p = numerator[0].len();
        if let Some(bad) = numerator.iter().chain(denominator).chain(centers).find(|x| x.len() != p) {
            return Err(Error::DimensionMismatch { expected: p, got: bad.len() });
        }
        let m = match basis {
            BasisKind::Constant => 1,
            BasisKind::Gaussian => centers.len(),
        };
        if m == 0 {
            return Err(Error::InvalidInput("at least one basis center is required".into()));
        }
        let mut h_mat = DMatrix::zeros(m, m);
        for x in denominator {
            let phi = DVector::from_vec(features(basis, centers, bandwidth, x));
            h_mat.ger(1.0, &phi, &phi, 1.0);
        }
        h_mat /= denominator.len() as f64;
        let mut h_vec = DVector::zeros(m);
        for x in numerator {
            h_vec += DVector::from_vec(features(basis, centers, bandwidth, x));
        }
        h_vec /= numerator.len() as f64;
        Ok(RatioSystem { h_mat, h_vec })
    }

    /// Unclamped solution of `(H + ridge I) a = h`.
    pub fn solve(&self, ridge: f64) -> Result<DVector<f64>> {
        let m = self.h_vec.len();
        let a = &self.h_mat + DMatrix::identity(m, m) * ridge;
        let singular = || {
            Error::Singular(format!(
                "ratio system is singular at ridge {ridge}; use a positive ridge penalty"
            ))
        };
        let chol = a.cholesky().ok_or_else(singular)?;
        let diag = chol.l_dirty().diagonal();
        let (lo, hi) = diag
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), d| (lo.min(d * d), hi.max(d * d)));
        if !(lo > 1e-14 * hi) {
            return Err(singular());
        }
        Ok(chol.solve(&self.h_vec))
    }
}

fn clamp(a: &DVector<f64>) -> Vec<f64> {
    a.iter().map(|v| v.max(0.0)).collect()
}

/// Fits with a fixed basis and ridge, no cross-validation.
pub fn fit_ratio_with(
    numerator: &[Vec<f64>],
    denominator: &[Vec<f64>],
    basis: BasisKind,
    centers: Vec<Vec<f64>>,
    bandwidth: f64,
    ridge: f64,
) -> Result<DensityRatioModel> {
    if basis == BasisKind::Gaussian && !(bandwidth > 0.0) {
        return Err(Error::InvalidInput("bandwidth must be positive".into()));
    }
    let sys = RatioSystem::build(numerator, denominator, basis, &centers, bandwidth)?;
    let alpha = sys.solve(ridge)?;
    let centers = match basis {
        BasisKind::Gaussian => centers,
        // keep the dimension for input validation
        BasisKind::Constant => vec![vec![0.0; numerator[0].len()]],
    };
    Ok(DensityRatioModel {
        basis,
        centers,
        bandwidth,
        coefficients: clamp(&alpha),
        ridge,
        numerator_arm: None,
        denominator_arm: None,
    })
}


fn fold_labels(n: usize, folds: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut labels = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        labels[i] = pos % folds;
    }
    labels
}

/// Fits a Gaussian-kernel ratio model, choosing `(bandwidth, ridge)` from
/// the configured grids by k-fold cross-validation.
pub fn fit_ratio(numerator: &[Vec<f64>], denominator: &[Vec<f64>], cfg: &BasisConfig) -> Result<DensityRatioModel> {
    cfg.validate()?;
    if numerator.is_empty() || denominator.is_empty() {
        return Err(Error::InvalidInput("ratio fitting needs non-empty samples".into()));
    }
    let p = numerator[0].len();
    if let Some(bad) = numerator.iter().chain(denominator).find(|x| x.len() != p) {
        return Err(Error::DimensionMismatch { expected: p, got: bad.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_centers = cfg.max_centers.min(numerator.len());
    let mut picks = sample(&mut rng, numerator.len(), n_centers).into_vec();
    picks.sort_unstable();
    let centers: Vec<Vec<f64>> = picks.iter().map(|&i| numerator[i].clone()).collect();

    let mut bandwidths = cfg.bandwidth_grid.clone();
    bandwidths.sort_by(f64::total_cmp);
    bandwidths.dedup();
    let mut ridges = cfg.ridge_grid.clone();
    ridges.sort_by(f64::total_cmp);
    ridges.dedup();

    let (bandwidth, ridge) = if bandwidths.len() * ridges.len() == 1 {
        (bandwidths[0], ridges[0])
    } else {
        if numerator.len() < cfg.folds || denominator.len() < cfg.folds {
            return Err(Error::InvalidInput(format!(
                "{} folds need at least {} units in each sample",
                cfg.folds, cfg.folds
            )));
        }
        let num_fold = fold_labels(numerator.len(), cfg.folds, &mut rng);
        let den_fold = fold_labels(denominator.len(), cfg.folds, &mut rng);
        let cv = CvFolds {
            numerator,
            denominator,
            num_fold: &num_fold,
            den_fold: &den_fold,
            folds: cfg.folds,
            centers: &centers,
        };
        // Losses in lexicographic (bandwidth, ridge) order.
        let losses: Vec<Vec<f64>> = bandwidths.par_iter().map(|&s| cv.losses(s, &ridges)).collect();
        let mut best: Option<((f64, f64), f64)> = None;
        for (&s, row) in bandwidths.iter().zip(&losses) {
            for (&l, &loss) in ridges.iter().zip(row) {
                if loss.is_finite() && best.is_none_or(|(_, b)| loss < b) {
                    best = Some(((s, l), loss));
                }
            }
        }
        best.ok_or_else(|| {
            Error::Singular("every (bandwidth, ridge) candidate gave a singular system; use a positive ridge".into())
        })?
        .0
    };
    fit_ratio_with(numerator, denominator, BasisKind::Gaussian, centers, bandwidth, ridge)
}

struct CvFolds<'a> {
    numerator: &'a [Vec<f64>],
    denominator: &'a [Vec<f64>],
    num_fold: &'a [usize],
    den_fold: &'a [usize],
    folds: usize,
    centers: &'a [Vec<f64>],
}

impl CvFolds<'_> {
    fn design(&self, xs: &[Vec<f64>], bandwidth: f64) -> DMatrix<f64> {
        let m = self.centers.len();
        let mut out = DMatrix::zeros(xs.len(), m);
        for (i, x) in xs.iter().enumerate() {
            for (j, f) in features(BasisKind::Gaussian, self.centers, bandwidth, x).into_iter().enumerate() {
                out[(i, j)] = f;
            }
        }
        out
    }

    fn rows(design: &DMatrix<f64>, labels: &[usize], fold: usize) -> DMatrix<f64> {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == fold).collect();
        design.select_rows(&idx)
    }

    /// Held-out squared-error criterion `mean_den r^2 / 2 - mean_num r`,
    /// averaged over folds, for each ridge value.
    fn losses(&self, bandwidth: f64, ridges: &[f64]) -> Vec<f64> {
        let phi_num = self.design(self.numerator, bandwidth);
        let phi_den = self.design(self.denominator, bandwidth);
        let parts: Vec<(DMatrix<f64>, DMatrix<f64>)> = (0..self.folds)
            .map(|f| (Self::rows(&phi_num, self.num_fold, f), Self::rows(&phi_den, self.den_fold, f)))
            .collect();
        let grams: Vec<DMatrix<f64>> = parts.iter().map(|(_, d)| d.tr_mul(d)).collect();
        let sums: Vec<DVector<f64>> = parts.iter().map(|(n, _)| n.row_sum().transpose()).collect();
        let gram_total = grams.iter().fold(DMatrix::zeros(self.centers.len(), self.centers.len()), |a, g| a + g);
        let sum_total = sums.iter().fold(DVector::zeros(self.centers.len()), |a, v| a + v);
        let mut totals = vec![0.0; ridges.len()];
        for (f, (num_held, den_held)) in parts.iter().enumerate() {
            let n_den = (self.denominator.len() - den_held.nrows()) as f64;
            let n_num = (self.numerator.len() - num_held.nrows()) as f64;
            let sys = RatioSystem {
                h_mat: (&gram_total - &grams[f]) / n_den,
                h_vec: (&sum_total - &sums[f]) / n_num,
            };
            for (total, &ridge) in totals.iter_mut().zip(ridges) {
                let Ok(alpha) = sys.solve(ridge) else {
                    *total = f64::INFINITY;
                    continue;
                };
                let alpha = DVector::from_vec(clamp(&alpha));
                let r_den = den_held * &alpha;
                let r_num = num_held * &alpha;
                *total += 0.5 * r_den.norm_squared() / den_held.nrows() as f64 - r_num.sum() / num_held.nrows() as f64;
            }
        }
        totals.into_iter().map(|t| t / self.folds as f64).collect()
    }
}

/// One fitted ratio model per non-pivot arm, each against the pivot arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioScoreModel {
    pub pivot: usize,
    /// Indexed by arm; `None` at the pivot.
    pub models: Vec<Option<DensityRatioModel>>,
}

pub fn ratio_score_model(d: &Dataset, pivot: usize, cfg: &BasisConfig) -> Result<RatioScoreModel> {
    if pivot >= d.k() {
        return Err(Error::InvalidInput(format!("pivot {pivot} out of range")));
    }
    let sample = |arm: usize| -> Vec<Vec<f64>> {
        d.arm(arm).iter().map(|&i| d.units()[i].covariates.clone()).collect()
    };
    let denominator = sample(pivot);
    let models = (0..d.k())
        .map(|arm| {
            if arm == pivot {
                return Ok(None);
            }
            let mut m = fit_ratio(&sample(arm), &denominator, cfg)?;
            m.numerator_arm = Some(d.levels()[arm].clone());
            m.denominator_arm = Some(d.levels()[pivot].clone());
            Ok(Some(m))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RatioScoreModel { pivot, models })
}

impl RatioScoreModel {
    pub fn own_score(&self, x: &[f64]) -> Result<ScoreVector> {
        let log_values = self
            .models
            .iter()
            .flatten()
            .map(|m| m.log_ratio(x))
            .collect::<Result<Vec<_>>>()?;
        ScoreVector::new(self.pivot, log_values)
    }
}

impl ScoreModel for RatioScoreModel {
    fn num_arms(&self) -> usize {
        self.models.len()
    }

    fn dim(&self) -> usize {
        self.models.iter().flatten().find_map(|m| m.dim()).unwrap_or(0)
    }

    fn score(&self, x: &[f64], pivot: usize) -> Result<ScoreVector> {
        self.own_score(x)?.pivot_transform(pivot)
    }
}
