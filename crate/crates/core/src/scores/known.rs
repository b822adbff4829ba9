use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::quadrature::integrate_box;
use super::{ScoreModel, ScoreVector};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// One term `coef * prod_j x_j^powers[j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub coef: f64,
    pub powers: Vec<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Polynomial {
    pub terms: Vec<Monomial>,
}

impl Polynomial {
    pub fn new(terms: Vec<Monomial>) -> Self {
        Polynomial { terms }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                t.powers
                    .iter()
                    .zip(x)
                    .fold(t.coef, |acc, (&p, &v)| acc * v.powi(p as i32))
            })
            .sum()
    }

    fn check_dim(&self, p: usize) -> Result<()> {
        match self.terms.iter().find(|t| t.powers.len() != p) {
            Some(t) => Err(Error::DimensionMismatch {
                expected: p,
                got: t.powers.len(),
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalArm {
    pub label: String,
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolynomialArm {
    pub label: String,
    /// `P_t(x)` in `log p(x|t) = log h(x) + P_t(x) - log Z_t`.
    pub exponent: Polynomial,
}

/// Serializable description of per-arm covariate densities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DensitySpec {
    Normal {
        arms: Vec<NormalArm>,
    },
    /// Polynomial exponential family restricted to a bounded box (p <= 2).
    PolynomialFamily {
        bounds: Vec<[f64; 2]>,
        /// `log h(x)`, shared by all arms.
        #[serde(default)]
        log_base: Polynomial,
        arms: Vec<PolynomialArm>,
    },
}

impl DensitySpec {
    /// Puts the arms in the order of `labels`, matching by label.
    pub fn reorder(&self, labels: &[&str]) -> Result<DensitySpec> {
        fn pick<T: Clone>(arms: &[T], label: impl Fn(&T) -> &str, want: &[&str]) -> Result<Vec<T>> {
            let have: Vec<&str> = arms.iter().map(&label).collect();
            let mut sorted_have = have.clone();
            let mut sorted_want = want.to_vec();
            sorted_have.sort_unstable();
            sorted_want.sort_unstable();
            if sorted_have != sorted_want {
                return Err(Error::InvalidInput(format!(
                    "known model arms {have:?} do not match dataset levels {want:?}"
                )));
            }
            Ok(want
                .iter()
                .map(|w| arms[have.iter().position(|h| h == w).unwrap()].clone())
                .collect())
        }
        Ok(match self {
            DensitySpec::Normal { arms } => DensitySpec::Normal {
                arms: pick(arms, |a| a.label.as_str(), labels)?,
            },
            DensitySpec::PolynomialFamily { bounds, log_base, arms } => DensitySpec::PolynomialFamily {
                bounds: bounds.clone(),
                log_base: log_base.clone(),
                arms: pick(arms, |a| a.label.as_str(), labels)?,
            },
        })
    }
}

#[derive(Debug, Clone)]
struct Gaussian {
    mean: DVector<f64>,
    chol_l: DMatrix<f64>,
    log_norm: f64,
}

impl Gaussian {
    fn new(arm: &NormalArm) -> Result<Self> {
        let p = arm.mean.len();
        if arm.cov.len() != p || arm.cov.iter().any(|r| r.len() != p) {
            return Err(Error::InvalidInput(format!(
                "covariance of arm '{}' is not {p}x{p}",
                arm.label
            )));
        }
        let cov = DMatrix::from_fn(p, p, |i, j| arm.cov[i][j]);
        let chol = cov.cholesky().ok_or_else(|| {
            Error::InvalidInput(format!("covariance of arm '{}' is not positive definite", arm.label))
        })?;
        let l = chol.l();
        let log_det: f64 = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(Gaussian {
            mean: DVector::from_column_slice(&arm.mean),
            chol_l: l,
            log_norm: -0.5 * (p as f64 * LN_2PI + log_det),
        })
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let diff = DVector::from_column_slice(x) - &self.mean;
        let z = self
            .chol_l
            .solve_lower_triangular(&diff)
            .expect("cholesky factor has a positive diagonal");
        self.log_norm - 0.5 * z.norm_squared()
    }
}

#[derive(Debug, Clone)]
enum Family {
    Normal(Vec<Gaussian>),
    Polynomial {
        bounds: Vec<[f64; 2]>,
        log_base: Polynomial,
        exponents: Vec<Polynomial>,
        log_norms: Vec<f64>,
    },
}

/// Arm densities known in closed form (up to a numerically computed
/// normalizer for the polynomial family).
#[derive(Debug, Clone)]
pub struct KnownDensityModel {
    labels: Vec<String>,
    dim: usize,
    family: Family,
}

const QUAD_TOL: f64 = 1e-12;

impl KnownDensityModel {
    pub fn new(spec: &DensitySpec) -> Result<Self> {
        match spec {
            DensitySpec::Normal { arms } => {
                let dim = arms.first().map(|a| a.mean.len()).unwrap_or(0);
                check_arms(arms.len(), dim)?;
                if let Some(a) = arms.iter().find(|a| a.mean.len() != dim) {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        got: a.mean.len(),
                    });
                }
                Ok(KnownDensityModel {
                    labels: arms.iter().map(|a| a.label.clone()).collect(),
                    dim,
                    family: Family::Normal(arms.iter().map(Gaussian::new).collect::<Result<_>>()?),
                })
            }
            DensitySpec::PolynomialFamily {
                bounds,
                log_base,
                arms,
            } => {
                let dim = bounds.len();
                check_arms(arms.len(), dim)?;
                if dim > 2 {
                    return Err(Error::InvalidInput(
                        "polynomial family normalizers are supported for p <= 2 only".into(),
                    ));
                }
                if bounds.iter().any(|[lo, hi]| !(lo < hi) || !lo.is_finite() || !hi.is_finite()) {
                    return Err(Error::InvalidInput("box bounds must be finite with lo < hi".into()));
                }
                log_base.check_dim(dim)?;
                let mut log_norms = Vec::with_capacity(arms.len());
                for a in arms {
                    a.exponent.check_dim(dim)?;
                    log_norms.push(log_normalizer(bounds, |x| log_base.eval(x) + a.exponent.eval(x), &a.label)?);
                }
                Ok(KnownDensityModel {
                    labels: arms.iter().map(|a| a.label.clone()).collect(),
                    dim,
                    family: Family::Polynomial {
                        bounds: bounds.clone(),
                        log_base: log_base.clone(),
                        exponents: arms.iter().map(|a| a.exponent.clone()).collect(),
                        log_norms,
                    },
                })
            }
        }
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// `log Z_t` per arm for the polynomial family.
    pub fn log_normalizers(&self) -> Option<&[f64]> {
        match &self.family {
            Family::Polynomial { log_norms, .. } => Some(log_norms),
            Family::Normal(_) => None,
        }
    }

    pub fn log_density(&self, x: &[f64], arm: usize) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        let v = match &self.family {
            Family::Normal(g) => g[arm].log_density(x),
            Family::Polynomial {
                bounds,
                log_base,
                exponents,
                log_norms,
            } => {
                let inside = x.iter().zip(bounds).all(|(v, [lo, hi])| v >= lo && v <= hi);
                if inside {
                    log_base.eval(x) + exponents[arm].eval(x) - log_norms[arm]
                } else {
                    f64::NEG_INFINITY
                }
            }
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::DensityNotPositive {
                arm: self.labels[arm].clone(),
            })
        }
    }
}

fn check_arms(k: usize, dim: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::InvalidInput("a density model needs at least 2 arms".into()));
    }
    if dim == 0 {
        return Err(Error::InvalidInput("covariate dimension must be positive".into()));
    }
    Ok(())
}

/// `log ∫_box exp(g(x)) dx`, shifting by the grid maximum of `g` first.
fn log_normalizer<G: Fn(&[f64]) -> f64>(bounds: &[[f64; 2]], g: G, label: &str) -> Result<f64> {
    const GRID: usize = 41;
    let mut shift = f64::NEG_INFINITY;
    let mut point = vec![0.0; bounds.len()];
    for flat in 0..GRID.pow(bounds.len() as u32) {
        let mut rest = flat;
        for (v, [lo, hi]) in point.iter_mut().zip(bounds) {
            *v = lo + (hi - lo) * (rest % GRID) as f64 / (GRID - 1) as f64;
            rest /= GRID;
        }
        shift = shift.max(g(&point));
    }
    let mass = integrate_box(|x| (g(x) - shift).exp(), bounds, QUAD_TOL).unwrap_or(f64::NAN);
    if !(mass > 0.0) || !mass.is_finite() {
        return Err(Error::Numeric(format!("normalizer of arm '{label}' is not positive and finite")));
    }
    Ok(shift + mass.ln())
}

impl ScoreModel for KnownDensityModel {
    fn num_arms(&self) -> usize {
        self.labels.len()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, x: &[f64], pivot: usize) -> Result<ScoreVector> {
        if pivot >= self.num_arms() {
            return Err(Error::InvalidInput(format!("pivot {pivot} out of range")));
        }
        let logs = (0..self.num_arms())
            .map(|a| self.log_density(x, a))
            .collect::<Result<Vec<_>>>()?;
        ScoreVector::from_arm_logs(pivot, &logs)
    }
}
