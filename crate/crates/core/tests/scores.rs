use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use smatch::dataset::{Dataset, Unit};
use smatch::scores::{
    binary_propensity, check_pfc, fit_multinomial_logit, DensitySpec, KnownDensityModel, LogitFitOptions,
    LogitObjective, Monomial, MultinomialLogitModel, NormalArm, Polynomial, PolynomialArm, PriorWeights, ScoreModel,
    ScoreVector, ViolationKind,
};
use smatch::simulation::{generate, SimulationScenario};

fn mono(coef: f64, power: u32) -> Polynomial {
    Polynomial::new(vec![Monomial {
        coef,
        powers: vec![power],
    }])
}

/// Composite Simpson rule with `n` (even) panels.
fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

#[test]
fn polynomial_family_score_matches_simpson_normalizers() {
    let spec = DensitySpec::PolynomialFamily {
        bounds: vec![[-2.0, 2.0]],
        log_base: Polynomial::default(),
        arms: vec![
            PolynomialArm {
                label: "t1".into(),
                exponent: mono(1.0, 1),
            },
            PolynomialArm {
                label: "t2".into(),
                exponent: mono(2.0, 1),
            },
            PolynomialArm {
                label: "t3".into(),
                exponent: mono(1.0, 2),
            },
        ],
    };
    let model = KnownDensityModel::new(&spec).unwrap();
    let z1 = simpson(|x| x.exp(), -2.0, 2.0, 20_000);
    let z2 = simpson(|x| (2.0 * x).exp(), -2.0, 2.0, 20_000);
    let z3 = simpson(|x| (x * x).exp(), -2.0, 2.0, 20_000);
    let x = 1.5;
    let expected = [(2.0 * x - x) - (z2 / z1).ln(), (x * x - x) - (z3 / z1).ln()];
    let got = model.score(&[x], 0).unwrap();
    for (g, e) in got.log_values.iter().zip(expected) {
        assert!((g - e).abs() < 1e-9, "{g} vs {e}");
    }
}

#[test]
fn logit_gradient_matches_central_differences() {
    let (d, _) = generate(&SimulationScenario::reference(), 300, 11).unwrap();
    let obj = LogitObjective::new(&d, 0, 1e-3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let mut b = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.5..1.5));
        b.row_mut(0).fill(0.0);
        let g = obj.gradient(&b).unwrap();
        let h = 1e-5;
        for r in 1..3 {
            for c in 0..3 {
                let mut bp = b.clone();
                bp[(r, c)] += h;
                let mut bm = b.clone();
                bm[(r, c)] -= h;
                let fd = (obj.value(&bp).unwrap() - obj.value(&bm).unwrap()) / (2.0 * h);
                let rel = (fd - g[(r, c)]).abs() / g[(r, c)].abs().max(1e-3);
                assert!(rel < 1e-5, "entry ({r},{c}): fd {fd} vs {}", g[(r, c)]);
            }
        }
    }
}

#[test]
fn fitted_logit_recovers_generating_coefficients() {
    let sc = SimulationScenario::reference();
    let (d, _) = generate(&sc, 20_000, 3).unwrap();
    let opts = LogitFitOptions {
        ridge: 1e-8,
        ..Default::default()
    };
    let m = fit_multinomial_logit(&d, 0, &opts).unwrap();
    for (row, truth) in m.coefficients.iter().zip(&sc.assignment) {
        for (b, t) in row.iter().zip(truth) {
            assert!((b - t).abs() < 0.1, "{:?} vs {:?}", m.coefficients, sc.assignment);
        }
    }
}

/// Every covariate draw appears in each arm with fixed multiplicities, so
/// the empirical arm distribution is exactly independent of x.
#[test]
fn logit_slopes_vanish_when_assignment_ignores_covariates() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let copies = [2usize, 3, 5];
    let mut units = Vec::new();
    for _ in 0..500 {
        let x: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
        for (t, &c) in copies.iter().enumerate() {
            for _ in 0..c {
                units.push(Unit {
                    id: format!("{:05}", units.len()),
                    treatment: t,
                    covariates: x.clone(),
                    response: None,
                });
            }
        }
    }
    assert_eq!(units.len(), 5000);
    let d = Dataset::new(units, vec!["a".into(), "b".into(), "c".into()], vec!["x1".into(), "x2".into()]).unwrap();
    let m = fit_multinomial_logit(&d, 0, &LogitFitOptions::default()).unwrap();
    for row in &m.coefficients {
        for slope in &row[1..] {
            assert!(slope.abs() < 1e-3, "{:?}", m.coefficients);
        }
    }
    assert!((m.coefficients[1][0] - 1.5f64.ln()).abs() < 1e-3);
    assert!((m.coefficients[2][0] - 2.5f64.ln()).abs() < 1e-3);
}

#[test]
fn logit_and_known_normal_scores_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let units: Vec<Unit> = (0..20_000)
        .map(|i| {
            let t = usize::from(rng.random::<bool>());
            let z: f64 = rng.sample(StandardNormal);
            Unit {
                id: format!("{i:05}"),
                treatment: t,
                covariates: vec![z + t as f64],
                response: None,
            }
        })
        .collect();
    let d = Dataset::new(units, vec!["t1".into(), "t2".into()], vec!["x".into()]).unwrap();
    let fitted = fit_multinomial_logit(&d, 0, &LogitFitOptions::default()).unwrap();
    let known = KnownDensityModel::new(&DensitySpec::Normal {
        arms: vec![
            NormalArm {
                label: "t1".into(),
                mean: vec![0.0],
                cov: vec![vec![1.0]],
            },
            NormalArm {
                label: "t2".into(),
                mean: vec![1.0],
                cov: vec![vec![1.0]],
            },
        ],
    })
    .unwrap();
    for x in [-1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0] {
        let a = fitted.score(&[x], 0).unwrap().log_values[0];
        let b = known.score(&[x], 0).unwrap().log_values[0];
        assert!((a - b).abs() < 0.1, "x={x}: fitted {a} vs analytic {b}");
    }
}

#[test]
fn common_row_shift_leaves_scores_unchanged() {
    let base = vec![vec![0.0, 0.0, 0.0], vec![0.5, 1.0, 0.0], vec![-0.5, 0.0, 1.0]];
    let shift = [0.3, -1.2, 2.5];
    let shifted: Vec<Vec<f64>> = base
        .iter()
        .map(|r| r.iter().zip(shift).map(|(a, b)| a + b).collect())
        .collect();
    let priors = PriorWeights::new(vec![0.2, 0.3, 0.5]).unwrap();
    let m1 = MultinomialLogitModel::from_coefficients(base, 0, priors.clone()).unwrap();
    let m2 = MultinomialLogitModel::from_coefficients(shifted, 0, priors).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let x = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        for pivot in 0..3 {
            let a = m1.score(&x, pivot).unwrap();
            let b = m2.score(&x, pivot).unwrap();
            for (u, v) in a.log_values.iter().zip(&b.log_values) {
                assert!((u - v).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn propensity_on_two_point_distribution() {
    // p(.|1) = (0.25, 0.75) and p(.|2) = (0.75, 0.25) on {a, b}; at x = a the
    // ratio p(a|2)/p(a|1) is 3 and Bayes' rule gives P(T=1|a) directly.
    let priors = PriorWeights::uniform(2);
    let bayes = 0.5 * 0.25 / (0.5 * 0.25 + 0.5 * 0.75);
    let e = binary_propensity(&ScoreVector::new(0, vec![3f64.ln()]).unwrap(), &priors).unwrap();
    assert!((e - bayes).abs() < 1e-15);
    assert!((e - 0.25).abs() < 1e-15);
}

fn grid_1d(n: usize) -> Vec<f64> {
    (0..n).map(|i| -3.0 + 6.0 * i as f64 / (n - 1) as f64).collect()
}

fn grid_2d(side: usize) -> Vec<[f64; 2]> {
    let g: Vec<f64> = (0..side).map(|i| -2.0 + 4.0 * i as f64 / (side - 1) as f64).collect();
    g.iter().flat_map(|&a| g.iter().map(move |&b| [a, b])).collect()
}

#[test]
fn propensity_score_satisfies_both_criteria() {
    let m = MultinomialLogitModel::from_coefficients(vec![vec![0.0, 0.0], vec![0.3, 1.1]], 0, PriorWeights::uniform(2))
        .unwrap();
    let grid = grid_1d(100);
    let q: Vec<Vec<f64>> = grid.iter().map(|&x| m.posterior(&[x]).unwrap()).collect();
    let priors = PriorWeights::uniform(2);
    let stats: Vec<Vec<f64>> = grid
        .iter()
        .map(|&x| vec![binary_propensity(&m.glm_score(&[x]).unwrap(), &priors).unwrap()])
        .collect();
    for (s, row) in stats.iter().zip(&q) {
        assert!((s[0] - row[0]).abs() < 1e-12);
    }
    let r = check_pfc(&q, &stats, 1e-9).unwrap();
    assert!(r.holds(), "{:?}", r.violations.first());
}

#[test]
fn logit_score_satisfies_both_criteria() {
    let priors = PriorWeights::new(vec![0.5, 0.3, 0.2]).unwrap();
    let m = MultinomialLogitModel::from_coefficients(
        vec![vec![0.0, 0.0, 0.0], vec![0.5, 1.0, 0.0], vec![-0.5, 0.0, 1.0]],
        0,
        priors,
    )
    .unwrap();
    let grid = grid_2d(10);
    let q: Vec<Vec<f64>> = grid.iter().map(|x| m.posterior(x).unwrap()).collect();
    let stats: Vec<Vec<f64>> = grid.iter().map(|x| m.glm_score(x).unwrap().log_values).collect();
    let r = check_pfc(&q, &stats, 1e-9).unwrap();
    assert!(r.holds());
}

#[test]
fn constant_statistic_yields_sufficiency_witness() {
    let m = MultinomialLogitModel::from_coefficients(vec![vec![0.0, 0.0], vec![0.0, 1.0]], 0, PriorWeights::uniform(2))
        .unwrap();
    let grid = grid_1d(100);
    let q: Vec<Vec<f64>> = grid.iter().map(|&x| m.posterior(&[x]).unwrap()).collect();
    let stats = vec![vec![0.0]; grid.len()];
    let r = check_pfc(&q, &stats, 1e-9).unwrap();
    assert!(!r.sufficient);
    let w = r.witness(ViolationKind::Sufficiency).unwrap();
    let (i, j) = w.pair;
    assert!((q[i][1] / q[j][1] - q[i][0] / q[j][0]).abs() > 1e-9);
}

/// With `B_2 = (0, 1, 1)` the posterior depends on `x1 + x2` only, so the
/// raw covariate vector is sufficient but not coarsest: (a, b) and (b, a)
/// share a posterior.
#[test]
fn identity_statistic_is_sufficient_not_coarsest() {
    let m = MultinomialLogitModel::from_coefficients(
        vec![vec![0.0, 0.0, 0.0], vec![0.0, 1.0, 1.0]],
        0,
        PriorWeights::uniform(2),
    )
    .unwrap();
    let grid = grid_2d(10);
    let q: Vec<Vec<f64>> = grid.iter().map(|x| m.posterior(x).unwrap()).collect();
    let stats: Vec<Vec<f64>> = grid.iter().map(|x| x.to_vec()).collect();
    let r = check_pfc(&q, &stats, 1e-9).unwrap();
    assert!(r.sufficient);
    assert!(!r.coarsest);
    let w = r.witness(ViolationKind::Coarseness).unwrap();
    let (a, b) = (grid[w.pair.0], grid[w.pair.1]);
    assert_ne!(a, b);
    assert!((a[0] + a[1] - b[0] - b[1]).abs() < 1e-12);
}

#[test]
fn true_logit_score_is_sufficient_on_sampled_grid() {
    let sc = SimulationScenario::reference();
    let (d, _) = generate(&sc, 100, 4).unwrap();
    let m = sc.assignment_model(PriorWeights::empirical(&d)).unwrap();
    let q: Vec<Vec<f64>> = d.units().iter().map(|u| m.posterior(&u.covariates).unwrap()).collect();
    let stats: Vec<Vec<f64>> = d.units().iter().map(|u| m.glm_score(&u.covariates).unwrap().log_values).collect();
    assert!(check_pfc(&q, &stats, 1e-9).unwrap().sufficient);
}
