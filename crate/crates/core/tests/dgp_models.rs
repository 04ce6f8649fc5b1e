use ghicast_core::dgp::{self, ess_step, DgpConfig};
use ghicast_core::gp::{self, kernel_matrix, GpConfig, GpModel, KernelParams};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

fn sigma3() -> DMatrix<f64> {
    let x = DMatrix::from_column_slice(3, 1, &[0.0, 0.7, 1.5]);
    let mut k = kernel_matrix(&x, &KernelParams { length_scales: vec![1.0], signal_variance: 1.0, noise_variance: 0.0 });
    for i in 0..3 {
        k[(i, i)] += 1e-6;
    }
    k
}

/// Mean and standard error from batch means.
fn batch_stats(xs: &[f64]) -> (f64, f64) {
    let b = 50;
    let len = xs.len() / b;
    let means: Vec<f64> = (0..b).map(|i| xs[i * len..(i + 1) * len].iter().sum::<f64>() / len as f64).collect();
    let m = means.iter().sum::<f64>() / b as f64;
    let v = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (b - 1) as f64;
    (m, (v / b as f64).sqrt())
}

#[test]
fn ess_flat_likelihood_recovers_prior() {
    let s = sigma3();
    let l = s.clone().cholesky().unwrap().l();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut f = DVector::zeros(3);
    let mut draws = Vec::new();
    for _ in 0..5000 {
        f = ess_step(&f, &l, |_| 0.0, &mut rng).unwrap();
        draws.push(f.clone());
    }
    for i in 0..3 {
        let col: Vec<f64> = draws.iter().map(|d| d[i]).collect();
        let (m, se) = batch_stats(&col);
        assert!(m.abs() < 3.0 * se + 1e-12, "mean[{i}] {m} se {se}");
        for j in 0..3 {
            let prod: Vec<f64> = draws.iter().map(|d| d[i] * d[j]).collect();
            let (c, se) = batch_stats(&prod);
            assert!((c - s[(i, j)]).abs() < 3.0 * se, "cov[{i},{j}] {c} vs {} (se {se})", s[(i, j)]);
        }
    }
}

#[test]
fn ess_conjugate_posterior_mean() {
    let s = sigma3();
    let l = s.clone().cholesky().unwrap().l();
    let y = DVector::from_column_slice(&[0.5, -0.3, 1.2]);
    let noise = 0.25;
    let exact = &s * (&s + DMatrix::identity(3, 3) * noise).try_inverse().unwrap() * &y;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut f = DVector::zeros(3);
    let mut draws = Vec::new();
    for it in 0..20500 {
        f = ess_step(&f, &l, |g| -0.5 * (&y - g).norm_squared() / noise, &mut rng).unwrap();
        if it >= 500 {
            draws.push(f.clone());
        }
    }
    for i in 0..3 {
        let col: Vec<f64> = draws.iter().map(|d| d[i]).collect();
        let (m, se) = batch_stats(&col);
        assert!((m - exact[i]).abs() < 3.0 * se, "component {i}: {m} vs {} (se {se})", exact[i]);
    }
}

#[test]
fn ess_gaussian_target_passes_ks() {
    // Prior N(0, 1), likelihood N(1.5 | f, 0.5): posterior N(1.0, 1/3).
    let l = DMatrix::from_element(1, 1, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut f = DVector::zeros(1);
    let mut xs = Vec::new();
    let thin = 10;
    for it in 0..(1000 + 5000 * thin) {
        f = ess_step(&f, &l, |g| -(1.5 - g[0]).powi(2), &mut rng).unwrap();
        if it >= 1000 && (it - 1000) % thin == 0 {
            xs.push(f[0]);
        }
    }
    xs.sort_by(f64::total_cmp);
    let post = Normal::new(1.0, (1.0f64 / 3.0).sqrt()).unwrap();
    let n = xs.len() as f64;
    let d = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = post.cdf(x);
            (c - i as f64 / n).abs().max(((i + 1) as f64 / n - c).abs())
        })
        .fold(0.0, f64::max);
    // Asymptotic 1% critical value.
    assert!(d < 1.628 / n.sqrt(), "KS statistic {d}");
}

fn gp_sample(n: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..6.0)).collect();
    let x = DMatrix::from_column_slice(n, 1, &xs);
    let mut k = kernel_matrix(&x, &KernelParams { length_scales: vec![1.0], signal_variance: 1.0, noise_variance: 0.0 });
    for i in 0..n {
        k[(i, i)] += 1e-8 + 0.01;
    }
    let l = k.cholesky().unwrap().l();
    let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    (x, l * z)
}

fn rmse(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    ((a - b).norm_squared() / a.len() as f64).sqrt()
}

fn split(x: &DMatrix<f64>, y: &DVector<f64>, n_train: usize) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>, DVector<f64>) {
    let n = x.nrows();
    (
        x.rows(0, n_train).into_owned(),
        y.rows(0, n_train).into_owned(),
        x.rows(n_train, n - n_train).into_owned(),
        y.rows(n_train, n - n_train).into_owned(),
    )
}

#[test]
fn dgp_close_to_gp_on_gp_data() {
    let (x, y) = gp_sample(200, 21);
    let (xt, yt, xh, yh) = split(&x, &y, 100);
    let g = gp::fit(&xt, &yt, &gp::default_init(&xt, &yt, false), &GpConfig::default()).unwrap();
    let gp_rmse = rmse(&g.predict(&xh).unwrap().0, &yh);
    let cfg = DgpConfig { iterations: 800, burn_in: 400, thin: 5, seed: 1, ..Default::default() };
    let m = dgp::fit(&xt, &yt, &cfg).unwrap();
    let dgp_rmse = rmse(&m.predict(&xh).unwrap().mean, &yh);
    assert!(dgp_rmse <= 1.2 * gp_rmse, "dgp {dgp_rmse} vs gp {gp_rmse}");
}

#[test]
fn dgp_handles_step_at_least_as_well_as_gp() {
    // Regular grid, alternate points held out.
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let n = 300;
    let xs: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
    let ys: Vec<f64> = xs.iter().map(|&v| if v < 0.5 { 0.0 } else { 1.0 } + 0.02 * rng.sample::<f64, _>(StandardNormal)).collect();
    let pick = |r: usize| -> (DMatrix<f64>, DVector<f64>) {
        let idx: Vec<usize> = (r..n).step_by(2).collect();
        (DMatrix::from_fn(idx.len(), 1, |i, _| xs[idx[i]]), DVector::from_fn(idx.len(), |i, _| ys[idx[i]]))
    };
    let ((xt, yt), (xh, yh)) = (pick(0), pick(1));
    let g = gp::fit(&xt, &yt, &gp::default_init(&xt, &yt, false), &GpConfig::default()).unwrap();
    let gp_rmse = rmse(&g.predict(&xh).unwrap().0, &yh);
    let cfg = DgpConfig { iterations: 1500, burn_in: 750, seed: 2, ..Default::default() };
    let m = dgp::fit(&xt, &yt, &cfg).unwrap();
    let dgp_rmse = rmse(&m.predict(&xh).unwrap().mean, &yh);
    assert!(dgp_rmse <= gp_rmse, "dgp {dgp_rmse} vs gp {gp_rmse}");
}

#[test]
fn identity_inner_layer_matches_gp() {
    let (x, y) = gp_sample(60, 23);
    let (xt, yt, xh, _) = split(&x, &y, 40);
    let params = KernelParams::new(0.9, 1.1, 0.02).unwrap();
    let g = GpModel::condition(&xt, &yt, &params).unwrap();
    let (gm, gv) = g.predict(&xh).unwrap();
    let cfg = DgpConfig { iterations: 30, burn_in: 10, thin: 2, clamp_identity: true, fixed_outer: Some(params), ..Default::default() };
    let m = dgp::fit(&xt, &yt, &cfg).unwrap();
    let p = m.predict(&xh).unwrap();
    assert!((&p.mean - &gm).amax() < 1e-9);
    assert!((&p.var - &gv).amax() < 1e-9);
}

#[test]
fn smooth_inner_layer_approaches_gp() {
    // With a very long inner length scale the warping is nearly a constant
    // shift, which the stationary outer kernel cannot see.
    let (x, y) = gp_sample(60, 24);
    let (xt, yt, xh, _) = split(&x, &y, 40);
    let params = KernelParams::new(0.9, 1.1, 0.02).unwrap();
    let (gm, _) = GpModel::condition(&xt, &yt, &params).unwrap().predict(&xh).unwrap();
    let cfg = DgpConfig {
        iterations: 200,
        burn_in: 100,
        thin: 5,
        latent_nodes: Some(1),
        fixed_outer: Some(params),
        fixed_inner_length_scale: Some(1e3),
        ..Default::default()
    };
    let p = dgp::fit(&xt, &yt, &cfg).unwrap().predict(&xh).unwrap();
    assert!((&p.mean - &gm).amax() < 1e-3, "max diff {}", (&p.mean - &gm).amax());
}

#[test]
fn persistence_round_trip() {
    let (x, y) = gp_sample(20, 25);
    let m = dgp::fit(&x, &y, &DgpConfig { iterations: 40, burn_in: 20, thin: 4, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dgp.json");
    m.save_json(&path).unwrap();
    let back = dgp::DgpModel::load_json(&path).unwrap();
    assert_eq!(back.layers, 2);
    assert_eq!(back.draws.len(), 5);
    let xn = DMatrix::from_column_slice(3, 1, &[0.5, 2.0, 4.0]);
    assert_eq!(m.predict(&xn).unwrap().mean, back.predict(&xn).unwrap().mean);
}

#[test]
fn large_training_sets_are_subsampled() {
    let (x, y) = gp_sample(120, 26);
    let cfg = DgpConfig { iterations: 6, burn_in: 2, thin: 2, max_n: 50, ..Default::default() };
    let m = dgp::fit(&x, &y, &cfg).unwrap();
    assert_eq!(m.train_x.nrows(), 50);
    assert_eq!(m.subsample.as_ref().unwrap().original_n, 120);
}

