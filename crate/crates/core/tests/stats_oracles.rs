use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use taskaffinity::matrix::{MatrixKind, PairwiseMatrix};
use taskaffinity::paneldata::TaskPanel;
use taskaffinity::stats::{
    empirical_matrix, fit_sigmoid, matrix_correlation, pearson, sigmoid, snr_model, spearman,
};

/// Textbook two-pass Pearson, independent of the library's standardisation.
fn naive_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    sxy / (sxx * syy).sqrt()
}

fn distinct_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, n).prop_filter("spread", |v| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() > 1e-3
    })
}

proptest! {
    #[test]
    fn pearson_of_affine_images(x in distinct_vec(12), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let up: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let down: Vec<f64> = x.iter().map(|v| -a * v + b).collect();
        prop_assert!((pearson(&x, &up).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((pearson(&x, &down).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_matches_textbook_formula(x in distinct_vec(15), y in distinct_vec(15)) {
        prop_assert!((pearson(&x, &y).unwrap() - naive_pearson(&x, &y)).abs() < 1e-10);
    }

    #[test]
    fn spearman_ignores_monotone_transforms(x in distinct_vec(10), y in distinct_vec(10)) {
        let base = spearman(&x, &y).unwrap();
        let tx: Vec<f64> = x.iter().map(|v| v.powi(3) + 2.0 * v).collect();
        let ty: Vec<f64> = y.iter().map(|v| (v / 20.0).exp()).collect();
        prop_assert!((spearman(&tx, &ty).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn snr_model_is_monotone(a in 0.0f64..1.0, b in 0.0f64..1.0, s in 0.1f64..5.0, n in 0.1f64..5.0, rho in 0.01f64..1.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(snr_model(lo, s, n, rho) <= snr_model(hi, s, n, rho) + 1e-15);
        let alpha0 = n / (s + n);
        prop_assert!((snr_model(alpha0, s, n, rho) - rho / 2.0).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_recovers_noiseless_parameters(l in 0.3f64..1.5, k in 0.05f64..0.4, x0 in 25.0f64..75.0, b in -0.3f64..0.3) {
        let points: Vec<(f64, f64)> = (0..=20).map(|i| {
            let x = i as f64 * 5.0;
            (x, sigmoid(&[l, k, x0, b], x))
        }).collect();
        let fit = fit_sigmoid(&points).unwrap();
        prop_assert!(fit.r_squared >= 1.0 - 1e-9, "r² {}", fit.r_squared);
    }
}

#[test]
fn empirical_entry_equals_pearson_on_shared_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (n, k) = (200, 3);
    let features: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let labels: Vec<f64> = (0..n * k).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mask: Vec<bool> = (0..n * k).map(|_| rng.random_bool(0.6)).collect();
    let panel = TaskPanel::new(
        1,
        features,
        labels,
        mask,
        (0..k).map(|t| format!("t{t}")).collect(),
        (0..n).map(|i| format!("s{i}")).collect(),
    )
    .unwrap();
    let e = empirical_matrix(&panel, 20);
    for i in 0..k {
        for j in 0..k {
            let shared: Vec<usize> = (0..n).filter(|&s| panel.is_measured(s, i) && panel.is_measured(s, j)).collect();
            let xi: Vec<f64> = shared.iter().map(|&s| panel.label(s, i).unwrap()).collect();
            let xj: Vec<f64> = shared.iter().map(|&s| panel.label(s, j).unwrap()).collect();
            let expected = if i == j { 1.0 } else { naive_pearson(&xi, &xj) };
            assert!((e.value(i, j) - expected).abs() < 1e-12, "({i},{j})");
            assert_eq!(e.value(i, j), e.value(j, i));
        }
    }
}

fn random_symmetric(k: usize, rng: &mut ChaCha8Rng) -> PairwiseMatrix {
    let mut m = PairwiseMatrix::new(k, MatrixKind::Gradient, 1.0);
    for i in 0..k {
        for j in i + 1..k {
            m.set(i, j, rng.random_range(-1.0..1.0));
        }
    }
    m
}

#[test]
fn permutation_test_is_calibrated_under_the_null() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let trials = 100;
    let mut rejections = 0;
    for t in 0..trials {
        let a = random_symmetric(12, &mut rng);
        let b = random_symmetric(12, &mut rng);
        let c = matrix_correlation(&a, &b, 10_000, t).unwrap();
        assert!(c.p_value > 0.0 && c.p_value <= 1.0);
        if c.p_value < 0.05 {
            rejections += 1;
        }
    }
    let frac = rejections as f64 / trials as f64;
    assert!((0.01..=0.10).contains(&frac), "false-positive fraction {frac}");
}

#[test]
fn noisy_sigmoid_fits_beat_the_generating_curve() {
    let truth = [0.82, 0.15, 29.7, 0.0];
    let noise = Normal::new(0.0, 0.02).unwrap();
    let seeds = 20;
    let mut midpoints = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<(f64, f64)> = (1..=10)
            .map(|i| {
                let x = i as f64 * 10.0;
                (x, sigmoid(&truth, x) + noise.sample(&mut rng))
            })
            .collect();
        let fit = fit_sigmoid(&points).unwrap();
        let truth_rss: f64 = points.iter().map(|(x, y)| (y - sigmoid(&truth, *x)).powi(2)).sum();
        assert!(fit.residual_sum_squares <= truth_rss + 1e-12, "seed {seed}");
        midpoints += fit.midpoint;
    }
    let mean = midpoints / seeds as f64;
    assert!((mean - 29.7).abs() <= 1.0, "mean midpoint {mean}");
}
