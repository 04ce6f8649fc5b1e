use ghicast_core::aggregate::{self, ExpertMixture, LearningRate, Loss};
use ghicast_core::quantile::QuantileForecast;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("e{i}")).collect()
}

#[test]
fn three_round_hand_simulation() {
    let mut m = ExpertMixture::new(names(2), None, Loss::Square, LearningRate::Fixed(1.0)).unwrap();
    let rounds = [([1.0, 2.0], 1.5), ([0.0, 1.0], 1.0), ([2.0, 2.5], 2.0)];
    // Unnormalized weights are exp(-cumulative loss).
    let mut cum = [0.0f64; 2];
    for (x, y) in rounds {
        let w = [(-cum[0]).exp(), (-cum[1]).exp()];
        let s = w[0] + w[1];
        let p = (w[0] * x[0] + w[1] * x[1]) / s;
        assert!((m.predict(&x).unwrap() - p).abs() < 1e-12);
        m.update(&x, y).unwrap();
        cum[0] += (x[0] - y) * (x[0] - y);
        cum[1] += (x[1] - y) * (x[1] - y);
    }
    // Cumulative losses (0.25+1+0, 0.25+0+0.25) = (1.25, 0.5).
    let w0 = (-1.25f64).exp() / ((-1.25f64).exp() + (-0.5f64).exp());
    assert!((m.weights[0] - w0).abs() < 1e-12);
    assert!((m.weights[1] - (1.0 - w0)).abs() < 1e-12);
}

#[test]
fn exact_expert_takes_over() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut m = ExpertMixture::new(names(2), None, Loss::Square, LearningRate::Auto).unwrap();
    for _ in 0..200 {
        let y = rng.random_range(0.0..800.0);
        m.update(&[y, y + 100.0], y).unwrap();
    }
    assert!(m.weights[0] > 0.99, "{:?}", m.weights);
}

#[test]
fn forecasts_stay_in_hull() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10_000 {
        let k = rng.random_range(1..6);
        let mut w: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        let m = ExpertMixture::new(names(k), Some(w), Loss::Square, LearningRate::Auto);
        let Ok(m) = m else { continue };
        let x: Vec<f64> = (0..k).map(|_| rng.random_range(-1e3..1e3)).collect();
        let p = m.predict(&x).unwrap();
        let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(p >= lo && p <= hi);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weights_remain_convex(
        seed in 0u64..10_000,
        k in 1usize..6,
        share in proptest::option::of(0.0f64..0.5),
        tau in proptest::option::of(0.05f64..0.95),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let loss = tau.map(Loss::Pinball).unwrap_or(Loss::Square);
        let mut m = ExpertMixture::new(names(k), None, loss, LearningRate::Auto).unwrap();
        if let Some(a) = share {
            m = m.with_fixed_share(a).unwrap();
        }
        for _ in 0..100 {
            let x: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1000.0)).collect();
            let y = rng.random_range(0.0..1000.0);
            m.update(&x, y).unwrap();
            let s: f64 = m.weights.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(m.weights.iter().all(|w| *w >= 0.0));
        }
    }
}

#[test]
fn regret_grows_no_faster_than_sqrt_t() {
    // Constant c in regret ≤ c·B·sqrt(T ln K), fitted over horizons and seeds.
    let k = 4;
    let mut worst: f64 = 0.0;
    for &t in &[200usize, 1000, 5000] {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let bias: Vec<f64> = (0..k).map(|_| rng.random_range(-0.3..0.3)).collect();
            let mut m = ExpertMixture::new(names(k), None, Loss::Square, LearningRate::Auto).unwrap();
            let mut agg = 0.0;
            let mut per = vec![0.0; k];
            let mut b: f64 = 0.0;
            for _ in 0..t {
                let y: f64 = rng.random_range(0.0..1.0);
                let x: Vec<f64> = bias.iter().map(|c| (y + c + rng.random_range(-0.3..0.3)).clamp(0.0, 1.0)).collect();
                let p = m.predict(&x).unwrap();
                agg += (p - y).powi(2);
                for j in 0..k {
                    per[j] += (x[j] - y).powi(2);
                }
                b = b.max(1.0);
                m.update(&x, y).unwrap();
            }
            let best = per.iter().copied().fold(f64::INFINITY, f64::min);
            let c = (agg - best) / (b * (t as f64 * (k as f64).ln()).sqrt());
            worst = worst.max(c);
        }
    }
    println!("fitted regret constant {worst:.4}");
    assert!(worst <= 1.0, "regret constant {worst}");
}

#[test]
fn quantile_aggregation_is_levelwise_and_sorted() {
    let levels = vec![0.1, 0.5, 0.9];
    let a = QuantileForecast::new(levels.clone(), DMatrix::from_fn(50, 3, |i, l| i as f64 + 10.0 * l as f64)).unwrap();
    let b = QuantileForecast::new(levels.clone(), DMatrix::from_fn(50, 3, |i, l| i as f64 + 5.0 + 2.0 * l as f64)).unwrap();
    let y: Vec<f64> = (0..50).map(|i| i as f64 + 6.0).collect();
    let (agg, runs) = aggregate::aggregate_quantiles(&names(2), &[&a, &b], &y, LearningRate::Auto, None).unwrap();
    assert_eq!(runs.len(), 3);
    assert_eq!(agg.len(), 50);
    for i in 0..50 {
        let row: Vec<f64> = agg.values.row(i).iter().copied().collect();
        assert!(row.windows(2).all(|w| w[0] <= w[1]));
    }
    // First row uses uniform weights.
    assert!((agg.values[(0, 1)] - 0.5 * (10.0 + 7.0)).abs() < 1e-12);
}
