//! Exact Gaussian process regression with a squared-exponential kernel.
//!
//! The prior mean is a constant, implemented by centring the targets. Kernel
//! hyperparameters are tuned by maximizing the log marginal likelihood with a
//! multi-start quasi-Newton search in log-parameter space.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_jittered, select_rows};
use crate::optim::{minimize_bfgs, BfgsOptions};

pub const FORMAT_VERSION: u32 = 1;

/// RBF kernel hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    /// One entry for an isotropic kernel, otherwise one per input dimension.
    pub length_scales: Vec<f64>,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl KernelParams {
    pub fn new(length_scale: f64, signal_variance: f64, noise_variance: f64) -> Result<Self> {
        let p = Self { length_scales: vec![length_scale], signal_variance, noise_variance };
        p.validate()?;
        Ok(p)
    }

    pub fn with_length_scales(length_scales: Vec<f64>, signal_variance: f64, noise_variance: f64) -> Result<Self> {
        let p = Self { length_scales, signal_variance, noise_variance };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if self.length_scales.is_empty() || !self.length_scales.iter().all(|&l| ok(l)) {
            return Err(Error::arg("length scales must be positive"));
        }
        if !ok(self.signal_variance) || !ok(self.noise_variance) {
            return Err(Error::arg("kernel variances must be positive"));
        }
        Ok(())
    }

    pub fn is_isotropic(&self) -> bool {
        self.length_scales.len() == 1
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if !self.is_isotropic() && self.length_scales.len() != d {
            return Err(Error::arg(format!(
                "{} length scales for {d}-dimensional inputs",
                self.length_scales.len()
            )));
        }
        Ok(())
    }

    #[inline]
    fn ls(&self, k: usize) -> f64 {
        if self.is_isotropic() {
            self.length_scales[0]
        } else {
            self.length_scales[k]
        }
    }

    fn to_log(&self) -> DVector<f64> {
        let mut v: Vec<f64> = self.length_scales.iter().map(|l| l.ln()).collect();
        v.push(self.signal_variance.ln());
        v.push(self.noise_variance.ln());
        DVector::from_vec(v)
    }

    fn from_log(theta: &DVector<f64>) -> Self {
        let k = theta.len() - 2;
        Self {
            length_scales: theta.iter().take(k).map(|v| v.exp()).collect(),
            signal_variance: theta[k].exp(),
            noise_variance: theta[k + 1].exp(),
        }
    }
}

#[inline]
fn scaled_sq_dist(xi: impl Iterator<Item = f64>, xj: impl Iterator<Item = f64>, p: &KernelParams) -> f64 {
    xi.zip(xj)
        .enumerate()
        .map(|(k, (a, b))| {
            let d = (a - b) / p.ls(k);
            d * d
        })
        .sum()
}

/// `σ² exp(-‖xi - xj‖² / (2 l²)) + [same_point] σ²_noise`.
pub fn rbf(xi: &[f64], xj: &[f64], params: &KernelParams, same_point: bool) -> Result<f64> {
    if xi.len() != xj.len() {
        return Err(Error::arg(format!("dimension mismatch: {} vs {}", xi.len(), xj.len())));
    }
    params.check_dim(xi.len())?;
    let r2 = scaled_sq_dist(xi.iter().copied(), xj.iter().copied(), params);
    let noise = if same_point { params.noise_variance } else { 0.0 };
    Ok(params.signal_variance * (-0.5 * r2).exp() + noise)
}

/// Noise-free kernel matrix `K(X, X)`, exactly symmetric.
pub fn kernel_matrix(x: &DMatrix<f64>, params: &KernelParams) -> DMatrix<f64> {
    let n = x.nrows();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = params.signal_variance;
        for j in 0..i {
            let r2 = scaled_sq_dist(x.row(i).iter().copied(), x.row(j).iter().copied(), params);
            let v = params.signal_variance * (-0.5 * r2).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cross-covariance `K(A, B)` (rows of A by rows of B).
pub fn cross_kernel(a: &DMatrix<f64>, b: &DMatrix<f64>, params: &KernelParams) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        let r2 = scaled_sq_dist(a.row(i).iter().copied(), b.row(j).iter().copied(), params);
        params.signal_variance * (-0.5 * r2).exp()
    })
}

/// Record of the uniform subsample used when the training set exceeds the exact-GP limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsampleRecord {
    pub original_n: usize,
    pub used_n: usize,
    pub seed: u64,
}

/// A trained exact GP.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpModel {
    pub format_version: u32,
    pub params: KernelParams,
    pub train_x: DMatrix<f64>,
    /// Centred targets.
    pub train_y: DVector<f64>,
    /// Lower Cholesky factor of `K + (σ²_noise + jitter) I`.
    pub factor: DMatrix<f64>,
    pub alpha: DVector<f64>,
    pub y_mean: f64,
    pub jitter: f64,
    pub subsample: Option<SubsampleRecord>,
}

impl GpModel {
    /// Conditions a GP with fixed hyperparameters on `(x, y)`.
    pub fn condition(x: &DMatrix<f64>, y: &DVector<f64>, params: &KernelParams) -> Result<Self> {
        params.validate()?;
        params.check_dim(x.ncols())?;
        if x.nrows() != y.len() {
            return Err(Error::arg("row count of X differs from length of y"));
        }
        if x.nrows() == 0 {
            return Err(Error::arg("no training data"));
        }
        let y_mean = y.mean();
        let yc = y.map(|v| v - y_mean);
        let mut k = kernel_matrix(x, params);
        for i in 0..k.nrows() {
            k[(i, i)] += params.noise_variance;
        }
        let f = cholesky_jittered(&k, params.signal_variance)?;
        let alpha = f.solve(&yc);
        Ok(Self {
            format_version: FORMAT_VERSION,
            params: params.clone(),
            train_x: x.clone(),
            train_y: yc,
            factor: f.l(),
            alpha,
            y_mean,
            jitter: f.jitter,
            subsample: None,
        })
    }

    pub fn n_train(&self) -> usize {
        self.train_x.nrows()
    }

    /// `-½ yᵀα - Σ log diag(L) - (N/2) log 2π` for the centred targets.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.train_y.len() as f64;
        -0.5 * self.train_y.dot(&self.alpha)
            - self.factor.diagonal().iter().map(|d| d.ln()).sum::<f64>()
            - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }

    /// Predictive mean and variance (including observation noise) at new inputs.
    pub fn predict(&self, x_new: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        if x_new.nrows() == 0 {
            return Ok((DVector::zeros(0), DVector::zeros(0)));
        }
        if x_new.ncols() != self.train_x.ncols() {
            return Err(Error::arg(format!(
                "expected {} input columns, got {}",
                self.train_x.ncols(),
                x_new.ncols()
            )));
        }
        let ks = cross_kernel(&self.train_x, x_new, &self.params);
        let mean = ks.transpose() * &self.alpha;
        let v = self
            .factor
            .solve_lower_triangular(&ks)
            .ok_or_else(|| Error::numerical("triangular solve failed"))?;
        let prior = self.params.signal_variance + self.params.noise_variance;
        let var = DVector::from_fn(x_new.nrows(), |j, _| {
            let q: f64 = v.column(j).norm_squared();
            (prior - q).max(1e-12)
        });
        Ok((mean.map(|m| m + self.y_mean), var))
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let m: Self = serde_json::from_reader(std::io::BufReader::new(f))?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Spec(format!("unsupported GP format version {}", m.format_version)));
        }
        Ok(m)
    }
}

/// Log marginal likelihood and its gradient with respect to the log hyperparameters.
///
/// Returns `None` when the kernel matrix cannot be factorized.
pub fn log_marginal_likelihood_and_grad(
    x: &DMatrix<f64>,
    y_centred: &DVector<f64>,
    params: &KernelParams,
) -> Option<(f64, DVector<f64>)> {
    let n = x.nrows();
    let kr = kernel_matrix(x, params);
    let mut k = kr.clone();
    for i in 0..n {
        k[(i, i)] += params.noise_variance;
    }
    let f = cholesky_jittered(&k, params.signal_variance).ok()?;
    let alpha = f.solve(y_centred);
    let lml = -0.5 * y_centred.dot(&alpha) - 0.5 * f.log_det() - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    if !lml.is_finite() {
        return None;
    }
    let kinv = f.chol.inverse();
    // W = ααᵀ - K⁻¹; dLML/dθ = ½ Σ_ij W_ij dK_ij
    let w = &alpha * alpha.transpose() - kinv;
    let n_ls = params.length_scales.len();
    let mut grad = DVector::zeros(n_ls + 2);
    for i in 0..n {
        for j in 0..n {
            let wij = w[(i, j)];
            let kij = kr[(i, j)];
            if i != j {
                if params.is_isotropic() {
                    let r2 = scaled_sq_dist(x.row(i).iter().copied(), x.row(j).iter().copied(), params);
                    grad[0] += wij * kij * r2;
                } else {
                    for d in 0..n_ls {
                        let diff = (x[(i, d)] - x[(j, d)]) / params.length_scales[d];
                        grad[d] += wij * kij * diff * diff;
                    }
                }
            }
            grad[n_ls] += wij * kij;
        }
        grad[n_ls + 1] += w[(i, i)] * params.noise_variance;
    }
    grad *= 0.5;
    Some((lml, grad))
}

/// Hyperparameter search settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpConfig {
    pub restarts: usize,
    pub max_iter: usize,
    /// Above this many rows a uniform subsample is used for the exact GP.
    pub max_exact_n: usize,
    pub subsample_n: usize,
    /// Hyperparameters are searched on at most this many rows; the final
    /// candidate choice is made on the full training set.
    pub search_n: usize,
    /// Per-dimension length scales.
    pub ard: bool,
    pub seed: u64,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self { restarts: 5, max_iter: 200, max_exact_n: 4000, subsample_n: 2000, search_n: 400, ard: false, seed: 0 }
    }
}

/// A reasonable starting point: unit length scale (inputs are standardized),
/// signal variance equal to the target variance, noise a tenth of it.
pub fn default_init(x: &DMatrix<f64>, y: &DVector<f64>, ard: bool) -> KernelParams {
    let v = y.variance().max(1e-6);
    let nls = if ard { x.ncols().max(1) } else { 1 };
    KernelParams { length_scales: vec![1.0; nls], signal_variance: v, noise_variance: 0.1 * v }
}

fn search_bounds(n_ls: usize, yvar: f64) -> (DVector<f64>, DVector<f64>) {
    let v = yvar.max(1e-12);
    let mut lo = vec![(1e-2f64).ln(); n_ls];
    let mut hi = vec![(1e3f64).ln(); n_ls];
    lo.push((1e-6 * v).ln());
    hi.push((1e4 * v).ln());
    lo.push((1e-8 * v).ln());
    hi.push((1e2 * v).ln());
    (DVector::from_vec(lo), DVector::from_vec(hi))
}

/// Fits a GP by maximizing the log marginal likelihood from `init` plus
/// `restarts - 1` perturbed starts.
///
/// The returned model's likelihood is never below that of `init` on the same
/// training rows.
pub fn fit(x: &DMatrix<f64>, y: &DVector<f64>, init: &KernelParams, cfg: &GpConfig) -> Result<GpModel> {
    if x.nrows() < 2 {
        return Err(Error::arg("GP fit needs at least 2 rows"));
    }
    if x.nrows() != y.len() {
        return Err(Error::arg("row count of X differs from length of y"));
    }
    init.validate()?;
    init.check_dim(x.ncols())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let (x, y, subsample) = if x.nrows() > cfg.max_exact_n {
        let mut idx = sample(&mut rng, x.nrows(), cfg.subsample_n.min(x.nrows())).into_vec();
        idx.sort_unstable();
        log::info!("GP training subsample: {} of {} rows", idx.len(), x.nrows());
        let rec = SubsampleRecord { original_n: x.nrows(), used_n: idx.len(), seed: cfg.seed };
        (select_rows(x, &idx), DVector::from_fn(idx.len(), |i, _| y[idx[i]]), Some(rec))
    } else {
        (x.clone(), y.clone(), None)
    };

    let (sx, sy) = if x.nrows() > cfg.search_n {
        let mut idx = sample(&mut rng, x.nrows(), cfg.search_n).into_vec();
        idx.sort_unstable();
        (select_rows(&x, &idx), DVector::from_fn(idx.len(), |i, _| y[idx[i]]))
    } else {
        (x.clone(), y.clone())
    };
    let sy_c = sy.map(|v| v - sy.mean());

    let theta0 = init.to_log();
    let (lo, hi) = search_bounds(init.length_scales.len(), sy.variance());
    let normal = Normal::new(0.0, 1.0).unwrap();
    let starts: Vec<DVector<f64>> = (0..cfg.restarts.max(1))
        .map(|r| {
            if r == 0 {
                theta0.clone()
            } else {
                DVector::from_fn(theta0.len(), |i, _| theta0[i] + normal.sample(&mut rng))
            }
        })
        .collect();

    let opts = BfgsOptions { max_iter: cfg.max_iter, f_tol: 1e-9, g_tol: 1e-6 };
    let optimized: Vec<DVector<f64>> = starts
        .par_iter()
        .map(|start| {
            let objective = |theta: &DVector<f64>| {
                let p = KernelParams::from_log(theta);
                match log_marginal_likelihood_and_grad(&sx, &sy_c, &p) {
                    Some((l, g)) => (-l, -g),
                    None => (f64::INFINITY, DVector::zeros(theta.len())),
                }
            };
            minimize_bfgs(objective, start, &lo, &hi, opts).x
        })
        .collect();

    // Candidates are ranked on the full training rows; init is always a candidate.
    let mut candidates = vec![init.clone()];
    candidates.extend(optimized.iter().map(KernelParams::from_log));
    let scored: Vec<(f64, Option<GpModel>)> = candidates
        .par_iter()
        .map(|p| match GpModel::condition(&x, &y, p) {
            Ok(m) => {
                let l = m.log_marginal_likelihood();
                if l.is_finite() {
                    (l, Some(m))
                } else {
                    (f64::NEG_INFINITY, None)
                }
            }
            Err(_) => (f64::NEG_INFINITY, None),
        })
        .collect();
    let mut best: Option<(f64, GpModel)> = None;
    for (l, m) in scored {
        if let Some(m) = m {
            if best.as_ref().is_none_or(|(bl, _)| l > *bl) {
                best = Some((l, m));
            }
        }
    }
    let (_, mut model) = best.ok_or_else(|| Error::numerical("every GP candidate had a non-finite likelihood"))?;
    model.subsample = subsample;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(l: f64, s: f64, n: f64) -> KernelParams {
        KernelParams::new(l, s, n).unwrap()
    }

    #[test]
    fn rbf_examples() {
        let k = rbf(&[0.3, 1.0], &[0.3, 1.0], &p(1.0, 2.0, 0.5), true).unwrap();
        assert!((k - 2.5).abs() < 1e-15);
        let far = rbf(&[0.0], &[1e3], &p(1.0, 2.0, 0.5), false).unwrap();
        assert_eq!(far, 0.0);
        let far_same = rbf(&[0.0], &[1e3], &p(1.0, 2.0, 0.5), true).unwrap();
        assert_eq!(far_same, 0.5);
        let unit = rbf(&[0.0], &[1.0], &KernelParams { length_scales: vec![1.0], signal_variance: 1.0, noise_variance: 0.0 }, false)
            .unwrap();
        // exp(-1/2) to 16 digits
        assert!((unit - 0.606_530_659_712_633_4).abs() < 1e-15);
        assert!(rbf(&[0.0], &[0.0, 1.0], &p(1.0, 1.0, 1.0), false).is_err());
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(KernelParams::new(0.0, 1.0, 1.0).is_err());
        assert!(KernelParams::new(1.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn lml_single_point_standard_normal() {
        let x = DMatrix::from_element(1, 1, 0.0);
        let y = DVector::from_element(1, 5.0);
        let m = GpModel::condition(&x, &y, &p(1.0, 0.5, 0.5)).unwrap();
        assert!((m.log_marginal_likelihood() + 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn lml_two_point_matches_explicit_inverse() {
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 0.7]);
        let y = DVector::from_vec(vec![1.0, 3.0]);
        let prm = p(0.9, 1.7, 0.3);
        let m = GpModel::condition(&x, &y, &prm).unwrap();
        let yc = [-1.0, 1.0];
        let a = 1.7 + 0.3;
        let b = 1.7 * (-(0.7f64 * 0.7) / (2.0 * 0.81)).exp();
        let det = a * a - b * b;
        let quad = (a * yc[0] * yc[0] - 2.0 * b * yc[0] * yc[1] + a * yc[1] * yc[1]) / det;
        let oracle = -0.5 * quad - 0.5 * det.ln() - (2.0 * std::f64::consts::PI).ln();
        assert!((m.log_marginal_likelihood() - oracle).abs() < 1e-12);
    }

    #[test]
    fn lml_drops_when_noise_inflated() {
        let x = DMatrix::from_fn(15, 1, |i, _| i as f64 * 0.4);
        let y = DVector::from_fn(15, |i, _| (i as f64 * 0.4).sin() * 3.0);
        let base = p(1.0, 4.0, 0.01);
        let noisy = p(1.0, 4.0, 0.01 * 1e6);
        let l0 = GpModel::condition(&x, &y, &base).unwrap().log_marginal_likelihood();
        let l1 = GpModel::condition(&x, &y, &noisy).unwrap().log_marginal_likelihood();
        assert!(l0.is_finite() && l1.is_finite() && l1 < l0);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let x = DMatrix::from_fn(10, 2, |i, j| ((i * 7 + j * 3) % 11) as f64 / 5.0 - 1.0);
        let y = DVector::from_fn(10, |i, _| (x[(i, 0)] * 2.0).sin() + 0.5 * x[(i, 1)]);
        let yc = y.map(|v| v - y.mean());
        for params in [p(0.8, 1.3, 0.05), KernelParams::with_length_scales(vec![0.7, 1.9], 0.9, 0.1).unwrap()] {
            let (_, g) = log_marginal_likelihood_and_grad(&x, &yc, &params).unwrap();
            let theta = params.to_log();
            for i in 0..theta.len() {
                let h = 1e-5;
                let mut tp = theta.clone();
                tp[i] += h;
                let mut tm = theta.clone();
                tm[i] -= h;
                let lp = log_marginal_likelihood_and_grad(&x, &yc, &KernelParams::from_log(&tp)).unwrap().0;
                let lm = log_marginal_likelihood_and_grad(&x, &yc, &KernelParams::from_log(&tm)).unwrap().0;
                let fd = (lp - lm) / (2.0 * h);
                assert!((g[i] - fd).abs() <= 1e-4 * fd.abs().max(1e-3), "component {i}: {} vs {}", g[i], fd);
            }
        }
    }

    #[test]
    fn predict_empty_and_dimension_mismatch() {
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let m = GpModel::condition(&x, &DVector::from_vec(vec![0.0, 1.0]), &p(1.0, 1.0, 0.1)).unwrap();
        let (mu, var) = m.predict(&DMatrix::zeros(0, 1)).unwrap();
        assert_eq!((mu.len(), var.len()), (0, 0));
        assert!(m.predict(&DMatrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn noise_free_interpolation() {
        let x = DMatrix::from_row_slice(4, 1, &[0.0, 1.0, 2.5, 4.0]);
        let y = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let m = GpModel::condition(&x, &y, &p(1.0, 2.0, 1e-10)).unwrap();
        let (mu, var) = m.predict(&x).unwrap();
        for i in 0..4 {
            assert!((mu[i] - y[i]).abs() < 1e-4);
            assert!(var[i] <= 1e-6 + m.jitter);
        }
    }

    #[test]
    fn constant_target_predicts_constant() {
        let x = DMatrix::from_fn(12, 1, |i, _| i as f64 / 4.0);
        let y = DVector::from_element(12, 7.5);
        let m = fit(&x, &y, &default_init(&x, &y, false), &GpConfig { restarts: 2, ..Default::default() }).unwrap();
        let (mu, _) = m.predict(&DMatrix::from_row_slice(2, 1, &[0.3, 9.0])).unwrap();
        assert!((mu[0] - 7.5).abs() < 1e-6 && (mu[1] - 7.5).abs() < 1e-6);
        assert!(m.params.signal_variance < m.params.noise_variance * 1e3 || m.params.signal_variance < 1e-3);
    }

    #[test]
    fn fit_never_worse_than_init_and_json_round_trip() {
        let x = DMatrix::from_fn(25, 1, |i, _| i as f64 / 5.0);
        let y = DVector::from_fn(25, |i, _| (i as f64 / 5.0).sin() * 2.0 + 0.1 * ((i * 13 % 7) as f64 - 3.0));
        let init = p(5.0, 0.2, 2.0);
        let init_lml = GpModel::condition(&x, &y, &init).unwrap().log_marginal_likelihood();
        let m = fit(&x, &y, &init, &GpConfig::default()).unwrap();
        assert!(m.log_marginal_likelihood() >= init_lml);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gp.json");
        m.save_json(&path).unwrap();
        let back = GpModel::load_json(&path).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.alpha, m.alpha);
    }

    #[test]
    fn large_training_sets_are_subsampled() {
        let x = DMatrix::from_fn(60, 1, |i, _| i as f64 / 10.0);
        let y = DVector::from_fn(60, |i, _| (i as f64 / 10.0).cos());
        let cfg = GpConfig { max_exact_n: 40, subsample_n: 30, restarts: 1, ..Default::default() };
        let m = fit(&x, &y, &default_init(&x, &y, false), &cfg).unwrap();
        assert_eq!(m.n_train(), 30);
        assert_eq!(m.subsample, Some(SubsampleRecord { original_n: 60, used_n: 30, seed: 0 }));
    }
}
