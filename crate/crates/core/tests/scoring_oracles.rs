use ghicast_core::quantile::{pinball, QuantileForecast};
use ghicast_core::scoring::{self, GammaFit};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

#[test]
fn mae_matches_compensated_reverse_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let y: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..1000.0)).collect();
    let f: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..1000.0)).collect();
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for i in (0..100).rev() {
        let v = (y[i] - f[i]).abs() - c;
        let t = s + v;
        c = (t - s) - v;
        s = t;
    }
    assert!((scoring::mae(&y, &f).unwrap() - s / 100.0).abs() < 1e-12);
    assert_eq!(scoring::mae(&[0.0, 2.0], &[1.0, 1.0]).unwrap(), 1.0);
    assert_eq!(scoring::rmse(&[0.0, 2.0], &[1.0, 1.0]).unwrap(), 1.0);
    assert!(scoring::mae(&[1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn rmse_dominates_mae() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let n = rng.random_range(1..50);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let f: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        assert!(scoring::rmse(&y, &f).unwrap() >= scoring::mae(&y, &f).unwrap() - 1e-12);
    }
}

#[test]
fn gamma_mle_recovers_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = Gamma::new(2.0, 3.0).unwrap();
    let xs: Vec<f64> = (0..100_000).map(|_| g.sample(&mut rng)).collect();
    let fit = scoring::fit_gamma(&xs, 0.0).unwrap();
    assert!((1.95..=2.05).contains(&fit.shape), "{fit:?}");
    assert!((2.9..=3.1).contains(&fit.scale), "{fit:?}");

    let e = Gamma::new(1.0, 5.0).unwrap();
    let xs: Vec<f64> = (0..100_000).map(|_| e.sample(&mut rng)).collect();
    let fit = scoring::fit_gamma(&xs, 0.0).unwrap();
    assert!((fit.shape - 1.0).abs() < 0.05, "{fit:?}");
}

#[test]
fn gamma_mle_beats_grid_neighbours() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = Gamma::new(3.5, 0.7).unwrap();
    let xs: Vec<f64> = (0..500).map(|_| g.sample(&mut rng)).collect();
    let fit = scoring::fit_gamma(&xs, 0.0).unwrap();
    let best = fit.log_likelihood(&xs);
    for dk in [-0.01, 0.0, 0.01] {
        for dt in [-0.01, 0.0, 0.01] {
            let alt = GammaFit::new(fit.shape * (1.0 + dk), fit.scale * (1.0 + dt), 0.0).unwrap();
            assert!(alt.log_likelihood(&xs) <= best + 1e-9);
        }
    }
    assert!(scoring::fit_gamma(&[4.0; 20], 0.0).is_err());
}

fn crps_mc(f: &GammaFit, y: f64, n: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let g = Gamma::new(f.shape, f.scale).unwrap();
    // Per-draw terms |X−y| − ½|X−X′| with independent pairs.
    let mut s = 0.0;
    let mut s2 = 0.0;
    for _ in 0..n {
        let a = g.sample(rng);
        let b = g.sample(rng);
        let v = (a - y).abs() - 0.5 * (a - b).abs();
        s += v;
        s2 += v * v;
    }
    let m = s / n as f64;
    (m, ((s2 / n as f64 - m * m) / n as f64).sqrt())
}

#[test]
fn crps_gamma_2_1_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = GammaFit::new(2.0, 1.0, 0.0).unwrap();
    let (m, se) = crps_mc(&f, 2.0, 1_000_000, &mut rng);
    let q = scoring::crps(&f, 2.0).unwrap();
    assert!((q - m).abs() < 3.0 * se, "{q} vs {m} ± {se}");
}

#[test]
fn crps_quadrature_agrees_with_sample_form_on_random_fits() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let f = GammaFit::new(rng.random_range(0.5..8.0), rng.random_range(0.1..50.0), 0.0).unwrap();
        let y = rng.random_range(0.0..(f.mean() + 3.0 * f.sd()));
        let (m, se) = crps_mc(&f, y, 200_000, &mut rng);
        let q = scoring::crps(&f, y).unwrap();
        assert!((q - m).abs() < 3.0 * se + 1e-6, "{f:?} y={y}: {q} vs {m} ± {se}");
    }
}

#[test]
fn crps_non_negative_on_random_probes() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10_000 {
        let f = GammaFit::new(rng.random_range(0.3..20.0), rng.random_range(0.01..100.0), 0.0).unwrap();
        let y = rng.random_range(-10.0..(f.mean() * 4.0));
        assert!(scoring::crps_closed_form(&f, y) >= -1e-9);
    }
    for _ in 0..300 {
        let f = GammaFit::new(rng.random_range(0.3..20.0), rng.random_range(0.01..100.0), 0.0).unwrap();
        let y = rng.random_range(-10.0..(f.mean() * 4.0));
        assert!(scoring::crps(&f, y).unwrap() >= 0.0);
    }
}

#[test]
fn logs_gamma_3_2_at_4() {
    // f(4) = 4²·e^(−2) / (Γ(3)·2³) = e^(−2).
    let f = GammaFit::new(3.0, 2.0, 0.0).unwrap();
    assert!((scoring::logs(&f, 4.0) - 2.0).abs() < 1e-13);
    assert_eq!(scoring::logs(&f, -1.0), f64::INFINITY);
}

#[test]
fn dss_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..1000 {
        let (m, s, y): (f64, f64, f64) = (rng.random_range(-5.0..5.0), rng.random_range(0.01..5.0), rng.random_range(-5.0..5.0));
        let z = (y - m) / s;
        assert!((scoring::dss(m, s, y).unwrap() - (z * z + 2.0 * s.ln())).abs() < 1e-12);
    }
}

#[test]
fn pl_single_median_level_is_mae() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let y: Vec<f64> = (0..40).map(|_| rng.random_range(0.0..900.0)).collect();
    let q: Vec<f64> = (0..40).map(|_| rng.random_range(0.0..900.0)).collect();
    let f = QuantileForecast::new(vec![0.5], DMatrix::from_column_slice(40, 1, &q)).unwrap();
    assert!((scoring::pl(&f, &y).unwrap() - scoring::mae(&y, &q).unwrap()).abs() < 1e-12);
    let exact = QuantileForecast::new(vec![0.1, 0.9], DMatrix::from_fn(40, 2, |i, _| y[i])).unwrap();
    assert_eq!(scoring::pl(&exact, &y).unwrap(), 0.0);
}

#[test]
fn elementary_scores_integrate_to_pinball() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..200 {
        let (q, y, tau): (f64, f64, f64) = (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0), rng.random_range(0.05..0.95));
        if (q - y).abs() < 1.0 {
            continue;
        }
        let (lo, hi) = (q.min(y) - 1.0, q.max(y) + 1.0);
        let m = 20_000;
        let h = (hi - lo) / m as f64;
        let integral: f64 = (0..m).map(|i| scoring::elementary_score(q, y, lo + (i as f64 + 0.5) * h, tau)).sum::<f64>() * h;
        let rho = pinball(y, q, tau).unwrap() / 2.0;
        assert!((integral - rho).abs() <= 0.01 * rho, "{integral} vs {rho}");
    }
}

#[test]
fn murphy_dominance_orders_pinball() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let y: Vec<f64> = (0..300).map(|_| rng.random_range(0.0..800.0)).collect();
    let a: Vec<f64> = y.iter().map(|v| v + rng.random_range(-20.0..20.0)).collect();
    let b: Vec<f64> = y.iter().map(|v| v + rng.random_range(-200.0..200.0)).collect();
    let tau = 0.5;
    let curve = scoring::murphy(&[("A".into(), a.clone()), ("B".into(), b.clone())], &y, tau, 101).unwrap();
    let diff = curve.difference("A", "B").unwrap();
    if diff.iter().all(|d| *d <= 0.0) {
        let pa: f64 = y.iter().zip(&a).map(|(y, q)| pinball(*y, *q, tau).unwrap()).sum();
        let pb: f64 = y.iter().zip(&b).map(|(y, q)| pinball(*y, *q, tau).unwrap()).sum();
        assert!(pa <= pb);
    } else {
        panic!("expected A to dominate B");
    }
    assert!(curve.mean_scores.iter().flatten().all(|s| *s >= 0.0));
    assert!(scoring::murphy(&[("A".into(), vec![])], &[], tau, 101).is_err());
}
