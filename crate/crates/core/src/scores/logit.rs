//! Ridge-penalized multinomial logit for the treatment posterior `q(t|x)`,
//! fitted by damped Newton iterations from a zero start.
//!
//! The canonical-form posterior has linear predictor `B_t' x~` per arm
//! (`x~` intercept-augmented), so the density log-ratio against the pivot is
//! `(B_i - B_pivot)' x~ - log(pi_i / pi_pivot)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{PriorWeights, ScoreModel, ScoreVector};
use crate::dataset::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogitFitOptions {
    /// Penalty `ridge/2 * |B|^2` subtracted from the mean log-likelihood.
    pub ridge: f64,
    /// Convergence threshold on the max-norm of the objective gradient.
    pub tol: f64,
    pub max_iter: usize,
    /// Any coefficient exceeding this in absolute value is treated as
    /// separation.
    pub max_coef: f64,
}

impl Default for LogitFitOptions {
    fn default() -> Self {
        LogitFitOptions {
            ridge: 1e-6,
            tol: 1e-8,
            max_iter: 200,
            max_coef: 1e4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitInfo {
    pub iterations: usize,
    /// Mean (per-unit) log-likelihood at the solution, unpenalized.
    pub log_likelihood: f64,
    pub gradient_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultinomialLogitModel {
    /// k rows of length p + 1, intercept first.
    pub coefficients: Vec<Vec<f64>>,
    pub pivot: usize,
    pub priors: PriorWeights,
    pub fit: Option<FitInfo>,
}

impl MultinomialLogitModel {
    /// Wraps a given coefficient matrix. Rows need not be normalized to a
    /// zero pivot row: scores only depend on row differences.
    pub fn from_coefficients(coefficients: Vec<Vec<f64>>, pivot: usize, priors: PriorWeights) -> Result<Self> {
        let k = coefficients.len();
        if k < 2 {
            return Err(Error::InvalidInput("logit model needs at least 2 rows".into()));
        }
        let width = coefficients[0].len();
        if width < 1 || coefficients.iter().any(|r| r.len() != width) {
            return Err(Error::InvalidInput("ragged logit coefficient matrix".into()));
        }
        if coefficients.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite logit coefficient".into()));
        }
        if pivot >= k {
            return Err(Error::InvalidInput(format!("pivot {pivot} out of range")));
        }
        if priors.probs().len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: priors.probs().len(),
            });
        }
        Ok(MultinomialLogitModel {
            coefficients,
            pivot,
            priors,
            fit: None,
        })
    }

    pub fn with_priors(mut self, priors: PriorWeights) -> Result<Self> {
        if priors.probs().len() != self.coefficients.len() {
            return Err(Error::DimensionMismatch {
                expected: self.coefficients.len(),
                got: priors.probs().len(),
            });
        }
        self.priors = priors;
        Ok(self)
    }

    /// Posterior `q(t|x)` for every arm.
    pub fn posterior(&self, x: &[f64]) -> Result<Vec<f64>> {
        let eta = self.linear_predictors(x)?;
        Ok(softmax(&eta))
    }

    pub fn linear_predictors(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok(self.coefficients.iter().map(|row| predictor(row, x)).collect())
    }

    /// Density log-ratio score under the model's own pivot.
    pub fn glm_score(&self, x: &[f64]) -> Result<ScoreVector> {
        self.score(x, self.pivot)
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        let p = self.coefficients[0].len() - 1;
        if x.len() != p {
            return Err(Error::DimensionMismatch { expected: p, got: x.len() });
        }
        Ok(())
    }
}

fn predictor(row: &[f64], x: &[f64]) -> f64 {
    row[1..].iter().zip(x).fold(row[0], |acc, (b, v)| acc + b * v)
}

fn softmax(eta: &[f64]) -> Vec<f64> {
    let m = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = eta.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl ScoreModel for MultinomialLogitModel {
    fn num_arms(&self) -> usize {
        self.coefficients.len()
    }

    fn dim(&self) -> usize {
        self.coefficients[0].len() - 1
    }

    fn score(&self, x: &[f64], pivot: usize) -> Result<ScoreVector> {
        self.check_dim(x)?;
        if pivot >= self.num_arms() {
            return Err(Error::InvalidInput(format!("pivot {pivot} out of range")));
        }
        let base = &self.coefficients[pivot];
        let pri = self.priors.probs();
        let log_values = (0..self.num_arms())
            .filter(|&i| i != pivot)
            .map(|i| {
                let diff: Vec<f64> = self.coefficients[i].iter().zip(base).map(|(a, b)| a - b).collect();
                predictor(&diff, x) - (pri[i] / pri[pivot]).ln()
            })
            .collect();
        ScoreVector::new(pivot, log_values)
    }
}

/// Penalized mean log-likelihood of the treatment labels, as a function of
/// the full `k x (p+1)` coefficient matrix whose pivot row is held at zero.
pub struct LogitObjective {
    design: DMatrix<f64>,
    labels: Vec<usize>,
    k: usize,
    pivot: usize,
    ridge: f64,
}

impl LogitObjective {
    pub fn new(d: &Dataset, pivot: usize, ridge: f64) -> Result<Self> {
        if pivot >= d.k() {
            return Err(Error::InvalidInput(format!("pivot {pivot} out of range")));
        }
        if !(ridge >= 0.0) {
            return Err(Error::InvalidInput("ridge must be nonnegative".into()));
        }
        let n = d.units().len();
        let p = d.p();
        let design = DMatrix::from_fn(n, p + 1, |i, j| {
            if j == 0 {
                1.0
            } else {
                d.units()[i].covariates[j - 1]
            }
        });
        Ok(LogitObjective {
            design,
            labels: d.units().iter().map(|u| u.treatment).collect(),
            k: d.k(),
            pivot,
            ridge,
        })
    }

    fn width(&self) -> usize {
        self.design.ncols()
    }

    fn free_arms(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.k).filter(move |&a| a != self.pivot)
    }

    fn check_shape(&self, b: &DMatrix<f64>) -> Result<()> {
        if b.nrows() != self.k || b.ncols() != self.width() {
            return Err(Error::DimensionMismatch {
                expected: self.k * self.width(),
                got: b.len(),
            });
        }
        Ok(())
    }

    fn predictors(&self, b: &DMatrix<f64>, i: usize) -> Vec<f64> {
        (0..self.k)
            .map(|a| {
                if a == self.pivot {
                    0.0
                } else {
                    (0..self.width()).map(|j| b[(a, j)] * self.design[(i, j)]).sum()
                }
            })
            .collect()
    }

    fn penalty(&self, b: &DMatrix<f64>) -> f64 {
        self.free_arms()
            .map(|a| b.row(a).iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            * 0.5
            * self.ridge
    }

    /// Unpenalized mean log-likelihood.
    pub fn log_likelihood(&self, b: &DMatrix<f64>) -> Result<f64> {
        self.check_shape(b)?;
        let n = self.labels.len();
        let mut total = 0.0;
        for i in 0..n {
            let eta = self.predictors(b, i);
            let m = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + eta.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += eta[self.labels[i]] - lse;
        }
        Ok(total / n as f64)
    }

    /// Penalized objective (to be maximized).
    pub fn value(&self, b: &DMatrix<f64>) -> Result<f64> {
        Ok(self.log_likelihood(b)? - self.penalty(b))
    }

    /// Analytic gradient of [`LogitObjective::value`]; the pivot row is zero.
    pub fn gradient(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_shape(b)?;
        let n = self.labels.len();
        let w = self.width();
        let mut g = DMatrix::zeros(self.k, w);
        for i in 0..n {
            let prob = softmax(&self.predictors(b, i));
            for a in self.free_arms() {
                let resid = f64::from(u8::from(self.labels[i] == a)) - prob[a];
                for j in 0..w {
                    g[(a, j)] += resid * self.design[(i, j)];
                }
            }
        }
        g /= n as f64;
        for a in self.free_arms() {
            for j in 0..w {
                g[(a, j)] -= self.ridge * b[(a, j)];
            }
        }
        Ok(g)
    }

    /// Negative Hessian over the free (non-pivot) rows, packed row-major.
    fn information(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let w = self.width();
        let free: Vec<usize> = self.free_arms().collect();
        let m = free.len() * w;
        let mut h = DMatrix::zeros(m, m);
        for i in 0..self.labels.len() {
            let prob = softmax(&self.predictors(b, i));
            for (r, &a) in free.iter().enumerate() {
                for (s, &c) in free.iter().enumerate().skip(r) {
                    let wgt = if a == c { prob[a] * (1.0 - prob[a]) } else { -prob[a] * prob[c] };
                    for j in 0..w {
                        let xj = self.design[(i, j)];
                        for l in 0..w {
                            h[(r * w + j, s * w + l)] += wgt * xj * self.design[(i, l)];
                        }
                    }
                }
            }
        }
        h /= self.labels.len() as f64;
        for r in 0..free.len() {
            for s in r + 1..free.len() {
                for j in 0..w {
                    for l in 0..w {
                        h[(s * w + l, r * w + j)] = h[(r * w + j, s * w + l)];
                    }
                }
            }
        }
        for d in 0..m {
            h[(d, d)] += self.ridge;
        }
        h
    }

    fn pack(&self, g: &DMatrix<f64>) -> DVector<f64> {
        let w = self.width();
        DVector::from_iterator(
            (self.k - 1) * w,
            self.free_arms().flat_map(|a| (0..w).map(move |j| g[(a, j)])),
        )
    }

    fn unpack_add(&self, b: &DMatrix<f64>, step: &DVector<f64>, t: f64) -> DMatrix<f64> {
        let w = self.width();
        let mut out = b.clone();
        for (r, a) in self.free_arms().enumerate() {
            for j in 0..w {
                out[(a, j)] += t * step[r * w + j];
            }
        }
        out
    }
}

const STEP_TOL: f64 = 1e-6;

/// Maximizes the ridge-penalized multinomial log-likelihood of the treatment
/// given intercept-augmented covariates. Priors default to empirical arm
/// frequencies.
pub fn fit_multinomial_logit(d: &Dataset, pivot: usize, opts: &LogitFitOptions) -> Result<MultinomialLogitModel> {
    let obj = LogitObjective::new(d, pivot, opts.ridge)?;
    let mut b = DMatrix::zeros(obj.k, obj.width());
    let mut f = obj.value(&b)?;
    for iter in 0..opts.max_iter {
        let g = obj.pack(&obj.gradient(&b)?);
        let gnorm = g.amax();
        if !gnorm.is_finite() {
            return Err(Error::NonConvergence("non-finite gradient".into()));
        }
        let info = obj.information(&b);
        let chol = info
            .cholesky()
            .ok_or_else(|| Error::NonConvergence("information matrix is not positive definite".into()))?;
        let step = chol.solve(&g);
        // Under separation the gradient vanishes while the Newton step does not.
        if gnorm < opts.tol && step.amax() < STEP_TOL * (1.0 + b.amax()) {
            let coefficients = (0..obj.k).map(|a| b.row(a).iter().copied().collect()).collect();
            let log_likelihood = obj.log_likelihood(&b)?;
            let mut model = MultinomialLogitModel::from_coefficients(coefficients, pivot, PriorWeights::empirical(d))?;
            model.fit = Some(FitInfo {
                iterations: iter,
                log_likelihood,
                gradient_norm: gnorm,
            });
            return Ok(model);
        }
        let slope = g.dot(&step);
        let slack = 1e-13 * (1.0 + f.abs());
        let mut t = 1.0;
        let mut accepted = None;
        while t > 1e-12 {
            let cand = obj.unpack_add(&b, &step, t);
            let fc = obj.value(&cand)?;
            if fc.is_finite() && fc >= f + 1e-4 * t * slope - slack {
                accepted = Some((cand, fc));
                break;
            }
            t *= 0.5;
        }
        let (nb, nf) =
            accepted.ok_or_else(|| Error::NonConvergence("line search failed to improve the objective".into()))?;
        if nb.amax() > opts.max_coef {
            return Err(Error::NonConvergence(format!(
                "coefficient magnitude exceeded {} (possible separation)",
                opts.max_coef
            )));
        }
        b = nb;
        f = nf;
    }
    Err(Error::NonConvergence(format!(
        "no convergence to tolerance {} after {} iterations (possible separation)",
        opts.tol, opts.max_iter
    )))
}
