use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use smatch::dataset::{Dataset, Unit};
use smatch::ratio_estim::{fit_ratio, ratio_score_model, BasisConfig, BasisKind, RatioSystem};
use smatch::scores::ScoreModel;

fn normal_sample(rng: &mut ChaCha8Rng, n: usize, mean: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| vec![mean + rng.sample::<f64, _>(StandardNormal)])
        .collect()
}

fn dataset(arms: &[Vec<Vec<f64>>]) -> Dataset {
    let mut units = Vec::new();
    for (t, sample) in arms.iter().enumerate() {
        for x in sample {
            units.push(Unit {
                id: format!("{:05}", units.len()),
                treatment: t,
                covariates: x.clone(),
                response: None,
            });
        }
    }
    let labels = (0..arms.len()).map(|t| format!("t{}", t + 1)).collect();
    Dataset::new(units, labels, vec!["x".into()]).unwrap()
}

const GRID: [f64; 6] = [-1.0, -0.5, 0.0, 0.5, 1.0, 1.5];

fn gaussian_pair() -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let den = normal_sample(&mut rng, 500, 0.0);
    let num = normal_sample(&mut rng, 500, 0.5);
    (num, den)
}

#[test]
fn gaussian_pair_ratio_is_recovered() {
    let (num, den) = gaussian_pair();
    let m = fit_ratio(&num, &den, &BasisConfig::default()).unwrap();
    let mae = GRID
        .iter()
        .map(|&x| (m.predict_ratio(&[x]).unwrap() - (0.5 * x - 0.125f64).exp()).abs())
        .sum::<f64>()
        / GRID.len() as f64;
    assert!(mae < 0.15, "mean absolute error {mae}");
}

#[test]
fn fitted_ratio_is_normalized_over_denominator() {
    let (num, den) = gaussian_pair();
    let m = fit_ratio(&num, &den, &BasisConfig::default()).unwrap();
    let mean = den.iter().map(|x| m.predict_ratio(x).unwrap()).sum::<f64>() / den.len() as f64;
    assert!((0.8..=1.2).contains(&mean), "{mean}");
}

#[test]
fn fitted_coefficients_solve_the_regularized_system() {
    let (num, den) = gaussian_pair();
    let m = fit_ratio(&num, &den, &BasisConfig::default()).unwrap();
    assert!(m.ridge > 0.0);
    let sys = RatioSystem::build(&num, &den, BasisKind::Gaussian, &m.centers, m.bandwidth).unwrap();
    let alpha = sys.solve(m.ridge).unwrap();
    let size = alpha.len();
    let residual = (&sys.h_mat + nalgebra::DMatrix::identity(size, size) * m.ridge) * &alpha - &sys.h_vec;
    assert!(residual.amax() < 1e-8, "{}", residual.amax());
    let clamped: Vec<f64> = alpha.iter().map(|v| v.max(0.0)).collect();
    assert_eq!(clamped, m.coefficients);
}

#[test]
fn fitting_is_deterministic() {
    let (num, den) = gaussian_pair();
    let cfg = BasisConfig {
        seed: 17,
        ..BasisConfig::default()
    };
    assert_eq!(fit_ratio(&num, &den, &cfg).unwrap(), fit_ratio(&num, &den, &cfg).unwrap());
}

#[test]
fn predictions_are_nonnegative() {
    let (num, den) = gaussian_pair();
    let m = fit_ratio(&num, &den, &BasisConfig::default()).unwrap();
    for i in -80..=80 {
        assert!(m.predict_ratio(&[i as f64 / 10.0]).unwrap() >= 0.0);
    }
}

#[test]
fn duplicated_arm_scores_near_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let sample = normal_sample(&mut rng, 500, 0.0);
    let d = dataset(&[sample.clone(), sample]);
    let m = ratio_score_model(&d, 0, &BasisConfig::default()).unwrap();
    let held_out = normal_sample(&mut rng, 50, 0.0);
    for x in held_out.iter().filter(|x| x[0].abs() < 2.0) {
        let s = m.score(x, 0).unwrap().log_values[0];
        assert!(s.abs() < 0.2, "x={x:?}: {s}");
    }
}

#[test]
fn three_normal_arms_match_analytic_log_ratios() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let means = [0.0, 0.5, 1.0];
    let arms: Vec<_> = means.iter().map(|&m| normal_sample(&mut rng, 1000, m)).collect();
    let d = dataset(&arms);
    let model = ratio_score_model(&d, 0, &BasisConfig::default()).unwrap();
    for x in [-0.5, 0.0, 0.5, 1.0] {
        let s = model.score(&[x], 0).unwrap();
        for (v, mu) in s.log_values.iter().zip(&means[1..]) {
            let exact = mu * x - mu * mu / 2.0;
            assert!((v - exact).abs() < 0.3, "x={x} mu={mu}: {v} vs {exact}");
        }
    }
}

#[test]
fn empty_sample_is_rejected() {
    let (num, _) = gaussian_pair();
    assert!(fit_ratio(&num, &[], &BasisConfig::default()).is_err());
    assert!(fit_ratio(&[], &num, &BasisConfig::default()).is_err());
}
