//! Generative scenarios with known assignment and outcome laws, and a Monte
//! Carlo runner that checks matched estimates against the true effects.
//!
//! Covariates are drawn from a Gaussian mixture, treatment from a
//! multinomial logit `q(t|x)`, and potential outcomes `r(t) = mu_t(x) + e_t`
//! for every arm with independent noise, so assignment is ignorable given `x`
//! by construction. Estimators only ever see the [`Dataset`]; the full
//! potential-outcome table stays with the caller.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{standardize, Dataset, Unit};
use crate::effects::estimate_pairwise;
use crate::error::{Error, Result};
use crate::matching::{match_units, MatchSpec, MatchingResult};
use crate::ratio_estim::{ratio_score_model, BasisConfig};
use crate::scores::{
    fit_multinomial_logit, LogitFitOptions, MultinomialLogitModel, Polynomial, PriorWeights, ScoreTable, ScoreVector,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutcomeModel {
    Linear { intercept: f64, slope: Vec<f64> },
    Polynomial { poly: Polynomial },
}

impl OutcomeModel {
    pub fn mean(&self, x: &[f64]) -> f64 {
        match self {
            OutcomeModel::Linear { intercept, slope } => slope.iter().zip(x).fold(*intercept, |a, (b, v)| a + b * v),
            OutcomeModel::Polynomial { poly } => poly.eval(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationScenario {
    #[serde(default)]
    pub name: Option<String>,
    pub k: usize,
    pub p: usize,
    /// Level labels; defaults to `t1..tk`.
    #[serde(default)]
    pub levels: Option<Vec<String>>,
    pub covariates: Vec<MixtureComponent>,
    /// Logit coefficients, k rows of length p + 1 (intercept first).
    pub assignment: Vec<Vec<f64>>,
    pub outcomes: Vec<OutcomeModel>,
    pub noise_sd: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SimulationScenario {
    /// Confounded three-arm scenario: X ~ N(0, I_2), logit rows (0,0,0),
    /// (0.5,1,0), (-0.5,0,1), mu_t(x) = a_t + x1 + x2 with a = (0,1,2), unit
    /// noise. True effects: t2-t1 = 1, t3-t2 = 1, t3-t1 = 2.
    pub fn reference() -> Self {
        SimulationScenario {
            name: Some("reference-confounded".into()),
            k: 3,
            p: 2,
            levels: None,
            covariates: vec![MixtureComponent {
                weight: 1.0,
                mean: vec![0.0, 0.0],
                cov: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            }],
            assignment: vec![vec![0.0, 0.0, 0.0], vec![0.5, 1.0, 0.0], vec![-0.5, 0.0, 1.0]],
            outcomes: [0.0, 1.0, 2.0]
                .iter()
                .map(|&a| OutcomeModel::Linear {
                    intercept: a,
                    slope: vec![1.0, 1.0],
                })
                .collect(),
            noise_sd: 1.0,
            seed: 20240601,
        }
    }

    pub fn level_labels(&self) -> Vec<String> {
        self.levels
            .clone()
            .unwrap_or_else(|| (1..=self.k).map(|t| format!("t{t}")).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("scenario: {m}")));
        if self.k < 2 || self.p == 0 {
            return bad("need k >= 2 and p >= 1");
        }
        if self.level_labels().len() != self.k {
            return bad("level labels do not match k");
        }
        if self.covariates.is_empty() {
            return bad("covariate mixture has no components");
        }
        let wsum: f64 = self.covariates.iter().map(|c| c.weight).sum();
        if self.covariates.iter().any(|c| !(c.weight >= 0.0)) || (wsum - 1.0).abs() > 1e-9 {
            return bad("mixture weights must be nonnegative and sum to 1");
        }
        for c in &self.covariates {
            if c.mean.len() != self.p || c.cov.len() != self.p || c.cov.iter().any(|r| r.len() != self.p) {
                return bad("mixture component has the wrong dimension");
            }
        }
        if self.assignment.len() != self.k || self.assignment.iter().any(|r| r.len() != self.p + 1) {
            return bad("assignment matrix must be k x (p+1)");
        }
        if self.assignment.iter().flatten().any(|v| !v.is_finite()) {
            return bad("assignment coefficients must be finite");
        }
        if self.outcomes.len() != self.k {
            return bad("need one outcome model per arm");
        }
        for o in &self.outcomes {
            match o {
                OutcomeModel::Linear { slope, .. } if slope.len() != self.p => {
                    return bad("linear outcome slope has the wrong length")
                }
                OutcomeModel::Polynomial { poly } if poly.terms.iter().any(|t| t.powers.len() != self.p) => {
                    return bad("outcome polynomial has the wrong dimension")
                }
                _ => {}
            }
        }
        if !(self.noise_sd >= 0.0) {
            return bad("noise sd must be nonnegative");
        }
        Ok(())
    }

    /// The true assignment law as a logit score model.
    pub fn assignment_model(&self, priors: PriorWeights) -> Result<MultinomialLogitModel> {
        MultinomialLogitModel::from_coefficients(self.assignment.clone(), 0, priors)
    }

    fn covariate_mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.p];
        for c in &self.covariates {
            for (a, b) in m.iter_mut().zip(&c.mean) {
                *a += c.weight * b;
            }
        }
        m
    }
}

/// Full potential outcomes `table[i][t]`, aligned with the dataset units.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialOutcomes {
    pub table: Vec<Vec<f64>>,
}

struct Sampler<'a> {
    sc: &'a SimulationScenario,
    chols: Vec<DMatrix<f64>>,
}

impl<'a> Sampler<'a> {
    fn new(sc: &'a SimulationScenario) -> Result<Self> {
        sc.validate()?;
        let chols = sc
            .covariates
            .iter()
            .map(|c| {
                DMatrix::from_fn(sc.p, sc.p, |i, j| c.cov[i][j])
                    .cholesky()
                    .map(|ch| ch.l())
                    .ok_or_else(|| Error::InvalidInput("scenario: mixture covariance is not positive definite".into()))
            })
            .collect::<Result<_>>()?;
        Ok(Sampler { sc, chols })
    }

    fn covariates<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut comp = self.sc.covariates.len() - 1;
        for (i, c) in self.sc.covariates.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                comp = i;
                break;
            }
        }
        let z = DVector::from_fn(self.sc.p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = &self.chols[comp] * z;
        x.iter().zip(&self.sc.covariates[comp].mean).map(|(a, m)| a + m).collect()
    }
}

/// Deterministic RNG for replication `rep` of a run seeded with `seed`.
pub fn rep_rng(seed: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    rng
}

pub fn generate(sc: &SimulationScenario, n: usize, seed: u64) -> Result<(Dataset, PotentialOutcomes)> {
    generate_with_rng(sc, n, &mut rep_rng(seed, 0))
}

pub fn generate_with_rng<R: Rng>(sc: &SimulationScenario, n: usize, rng: &mut R) -> Result<(Dataset, PotentialOutcomes)> {
    let sampler = Sampler::new(sc)?;
    if n < sc.k {
        return Err(Error::InvalidInput(format!("need n >= k ({n} < {})", sc.k)));
    }
    let width = (n.max(1) as f64).log10() as usize + 1;
    let mut units = Vec::with_capacity(n);
    let mut table = Vec::with_capacity(n);
    for i in 0..n {
        let x = sampler.covariates(rng);
        let eta: Vec<f64> = sc
            .assignment
            .iter()
            .map(|row| row[1..].iter().zip(&x).fold(row[0], |a, (b, v)| a + b * v))
            .collect();
        let m = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = eta.iter().map(|e| (e - m).exp()).collect();
        let total: f64 = w.iter().sum();
        let u: f64 = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut t = sc.k - 1;
        for (a, wa) in w.iter().enumerate() {
            acc += wa;
            if u < acc {
                t = a;
                break;
            }
        }
        let outcomes: Vec<f64> = sc
            .outcomes
            .iter()
            .map(|o| o.mean(&x) + sc.noise_sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        units.push(Unit {
            id: format!("u{:0width$}", i + 1),
            treatment: t,
            covariates: x,
            response: Some(outcomes[t]),
        });
        table.push(outcomes);
    }
    let names = (1..=sc.p).map(|j| format!("x{j}")).collect();
    let d = Dataset::new(units, sc.level_labels(), names)?;
    Ok((d, PotentialOutcomes { table }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AteMethod {
    ClosedForm,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueAte {
    pub value: f64,
    pub method: AteMethod,
    /// Monte Carlo standard error, when sampled.
    pub mc_error: Option<f64>,
}

pub const ATE_MC_DRAWS: usize = 1_000_000;
const ATE_MC_SEED: u64 = 0x05EE_DA7E;

/// `E{r(a) - r(b)}` under the scenario's covariate law.
pub fn true_ate(sc: &SimulationScenario, a: usize, b: usize) -> Result<TrueAte> {
    let sampler = Sampler::new(sc)?;
    if a >= sc.k || b >= sc.k {
        return Err(Error::InvalidInput("arm index out of range".into()));
    }
    if let (
        OutcomeModel::Linear {
            intercept: ia,
            slope: sa,
        },
        OutcomeModel::Linear {
            intercept: ib,
            slope: sb,
        },
    ) = (&sc.outcomes[a], &sc.outcomes[b])
    {
        let ex = sc.covariate_mean();
        let value = (ia - ib) + sa.iter().zip(sb).zip(&ex).map(|((u, v), e)| (u - v) * e).sum::<f64>();
        return Ok(TrueAte {
            value,
            method: AteMethod::ClosedForm,
            mc_error: None,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(ATE_MC_SEED);
    let (mut sum, mut sumsq) = (0.0, 0.0);
    for _ in 0..ATE_MC_DRAWS {
        let x = sampler.covariates(&mut rng);
        let diff = sc.outcomes[a].mean(&x) - sc.outcomes[b].mean(&x);
        sum += diff;
        sumsq += diff * diff;
    }
    let n = ATE_MC_DRAWS as f64;
    let mean = sum / n;
    let var = ((sumsq - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok(TrueAte {
        value: mean,
        method: AteMethod::MonteCarlo,
        mc_error: Some((var / n).sqrt()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScoreKind {
    /// Logit score from the scenario's own assignment coefficients.
    TrueLogit,
    FittedLogit { options: LogitFitOptions },
    Ratio { config: BasisConfig },
    /// Zero score for every unit (no balancing; negative control).
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub score: ScoreKind,
    /// Standardize covariates before fitting a score model.
    pub standardize: bool,
    /// Pivot, anchor arm and matching options.
    pub matching: MatchSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            score: ScoreKind::FittedLogit {
                options: LogitFitOptions::default(),
            },
            standardize: true,
            matching: MatchSpec::new(0),
        }
    }
}

/// Scores every unit of `d` according to `cfg`.
pub fn pipeline_scores(d: &Dataset, cfg: &PipelineConfig, sc: Option<&SimulationScenario>) -> Result<ScoreTable> {
    let pivot = cfg.matching.pivot;
    let fit_data = if cfg.standardize && !matches!(cfg.score, ScoreKind::TrueLogit) {
        standardize(d)?.0
    } else {
        d.clone()
    };
    match &cfg.score {
        ScoreKind::TrueLogit => {
            let sc = sc.ok_or_else(|| Error::InvalidInput("true-logit scores need a scenario".into()))?;
            let m = sc.assignment_model(PriorWeights::empirical(d))?;
            ScoreTable::from_model(&m, &fit_data, pivot)
        }
        ScoreKind::FittedLogit { options } => {
            let m = fit_multinomial_logit(&fit_data, pivot, options)?;
            ScoreTable::from_model(&m, &fit_data, pivot)
        }
        ScoreKind::Ratio { config } => {
            let m = ratio_score_model(&fit_data, pivot, config)?;
            ScoreTable::from_model(&m, &fit_data, pivot)
        }
        ScoreKind::Constant => {
            let entries = d
                .units()
                .iter()
                .map(|u| Ok((u.id.clone(), ScoreVector::new(pivot, vec![0.0; d.k() - 1])?)))
                .collect::<Result<Vec<_>>>()?;
            ScoreTable::from_entries(pivot, entries)
        }
    }
}

/// Everything one replication produces.
#[derive(Debug, Clone)]
pub struct RepOutcome {
    pub dataset: Dataset,
    pub matching: MatchingResult,
    /// Matched estimates per pair, in [`pairs`] order.
    pub matched: Vec<f64>,
    /// Naive arm-mean differences per pair.
    pub naive: Vec<f64>,
}

/// Pairs `(b, a)` with `b > a`, the order used by reports.
pub fn pairs(k: usize) -> Vec<(usize, usize)> {
    (0..k).flat_map(|a| (a + 1..k).map(move |b| (b, a))).collect()
}

fn naive_differences(d: &Dataset) -> Result<Vec<f64>> {
    let means = (0..d.k())
        .map(|t| {
            let arm = d.arm(t);
            let mut s = 0.0;
            for &i in arm {
                let u = &d.units()[i];
                s += u.response.ok_or_else(|| Error::MissingResponse(u.id.clone()))?;
            }
            Ok(s / arm.len() as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(pairs(d.k()).into_iter().map(|(b, a)| means[b] - means[a]).collect())
}

pub fn run_rep(sc: &SimulationScenario, cfg: &PipelineConfig, n: usize, seed: u64, rep: u64) -> Result<RepOutcome> {
    let (dataset, _hidden) = generate_with_rng(sc, n, &mut rep_rng(seed, rep))?;
    let scores = pipeline_scores(&dataset, cfg, Some(sc))?;
    let matching = match_units(&dataset, &scores, &cfg.matching)?;
    let report = estimate_pairwise(&matching, &dataset)?;
    let matched = report.estimates.iter().map(|e| e.estimate).collect();
    let naive = naive_differences(&dataset)?;
    Ok(RepOutcome {
        dataset,
        matching,
        matched,
        naive,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    /// `(b, a)`: effect of `b` relative to `a`.
    pub pair: (usize, usize),
    pub true_ate: f64,
    pub mean_estimate: f64,
    pub bias: f64,
    pub sd: f64,
    pub mc_se: f64,
    pub naive_mean: f64,
    pub naive_bias: f64,
    pub naive_sd: f64,
    pub naive_mc_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub reps: usize,
    pub completed: usize,
    pub failed: usize,
    pub failures: Vec<String>,
    pub pairs: Vec<PairSummary>,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// Runs `reps` independent replications (each on its own RNG stream) and
/// summarises bias of the matched and naive estimators for every pair.
pub fn run_experiment(
    sc: &SimulationScenario,
    cfg: &PipelineConfig,
    n: usize,
    reps: usize,
    seed: u64,
) -> Result<ExperimentReport> {
    sc.validate()?;
    if reps == 0 {
        return Err(Error::InvalidInput("reps must be positive".into()));
    }
    let truth = pairs(sc.k)
        .into_iter()
        .map(|(b, a)| true_ate(sc, b, a).map(|t| t.value))
        .collect::<Result<Vec<_>>>()?;
    let outcomes: Vec<Result<RepOutcome>> = (0..reps as u64)
        .into_par_iter()
        .map(|rep| run_rep(sc, cfg, n, seed, rep))
        .collect();
    let mut matched: Vec<Vec<f64>> = vec![Vec::with_capacity(reps); truth.len()];
    let mut naive = matched.clone();
    let mut failures = Vec::new();
    for (rep, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(o) => {
                for (j, (m, v)) in o.matched.iter().zip(&o.naive).enumerate() {
                    matched[j].push(*m);
                    naive[j].push(*v);
                }
            }
            Err(e) => failures.push(format!("rep {rep}: {e}")),
        }
    }
    if failures.len() * 10 > reps {
        return Err(Error::Numeric(format!(
            "{} of {reps} replications failed; first: {}",
            failures.len(),
            failures[0]
        )));
    }
    let completed = reps - failures.len();
    let root = (completed as f64).sqrt();
    let summaries = pairs(sc.k)
        .into_iter()
        .enumerate()
        .map(|(j, pair)| {
            let (mean_estimate, sd) = mean_sd(&matched[j]);
            let (naive_mean, naive_sd) = mean_sd(&naive[j]);
            PairSummary {
                pair,
                true_ate: truth[j],
                mean_estimate,
                bias: mean_estimate - truth[j],
                sd,
                mc_se: sd / root,
                naive_mean,
                naive_bias: naive_mean - truth[j],
                naive_sd,
                naive_mc_se: naive_sd / root,
            }
        })
        .collect();
    Ok(ExperimentReport {
        reps,
        completed,
        failed: failures.len(),
        failures,
        pairs: summaries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_responses_equal_outcome_mean() {
        let mut sc = SimulationScenario::reference();
        sc.noise_sd = 0.0;
        let (d, hidden) = generate(&sc, 200, 3).unwrap();
        for (u, row) in d.units().iter().zip(&hidden.table) {
            let mu = sc.outcomes[u.treatment].mean(&u.covariates);
            assert_eq!(u.response, Some(mu));
            assert_eq!(row[u.treatment], mu);
        }
    }

    #[test]
    fn same_seed_same_data() {
        let sc = SimulationScenario::reference();
        let a = generate(&sc, 300, 11).unwrap();
        let b = generate(&sc, 300, 11).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_ne!(generate(&sc, 300, 12).unwrap().0, a.0);
    }

    #[test]
    fn reference_truth_closed_form() {
        let sc = SimulationScenario::reference();
        assert_eq!(true_ate(&sc, 1, 0).unwrap().value, 1.0);
        assert_eq!(true_ate(&sc, 2, 1).unwrap().value, 1.0);
        assert_eq!(true_ate(&sc, 2, 0).unwrap().value, 2.0);
        assert_eq!(true_ate(&sc, 1, 1).unwrap().value, 0.0);
        assert_eq!(true_ate(&sc, 1, 0).unwrap().method, AteMethod::ClosedForm);
    }

    #[test]
    fn validation_catches_bad_scenarios() {
        let mut sc = SimulationScenario::reference();
        sc.covariates[0].weight = 0.5;
        assert!(sc.validate().is_err());
        let mut sc = SimulationScenario::reference();
        sc.covariates[0].cov = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        assert!(generate(&sc, 10, 0).is_err());
        let sc = SimulationScenario::reference();
        assert!(generate(&sc, 2, 0).is_err());
    }

    #[test]
    fn rep_streams_are_independent_of_rep_count() {
        let sc = SimulationScenario::reference();
        let cfg = PipelineConfig::default();
        let a = run_rep(&sc, &cfg, 150, 9, 4).unwrap();
        let b = run_rep(&sc, &cfg, 150, 9, 4).unwrap();
        assert_eq!(a.matched, b.matched);
        assert_eq!(a.dataset, b.dataset);
    }
}
