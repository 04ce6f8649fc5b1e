//! Two-layer deep Gaussian process: a latent warping `W = m(X) + F`,
//! `F_k ~ GP(0, Σ(X))`, feeding an outer RBF GP for the response. Sampled
//! with elliptical slice steps for `W` and random-walk Metropolis for the
//! kernel hyperparameters.

use std::path::Path;

use log::{debug, info};
use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{cross_kernel, default_init, kernel_matrix, GpModel, KernelParams, SubsampleRecord};
use crate::linalg::{cholesky_jittered, select_rows, JitteredCholesky};

pub const FORMAT_VERSION: u32 = 1;
pub const LAYERS: u32 = 2;

/// One elliptical slice sampling update of `current` under a zero-mean
/// Gaussian prior with lower factor `prior_factor`.
///
/// Always returns a state on the ellipse through `current` and a fresh prior
/// draw whose likelihood exceeds the slice level.
pub fn ess_step<R: Rng, F: FnMut(&DVector<f64>) -> f64>(
    current: &DVector<f64>,
    prior_factor: &DMatrix<f64>,
    mut log_lik: F,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let n = current.len();
    if prior_factor.shape() != (n, n) {
        return Err(Error::arg("prior factor does not match the state dimension"));
    }
    let l0 = log_lik(current);
    if !l0.is_finite() {
        return Err(Error::Sampler(format!("non-finite log-likelihood {l0} at the current state")));
    }
    let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let nu = prior_factor * z;
    let level = l0 + rng.random::<f64>().ln();
    let mut theta = rng.random_range(0.0..2.0 * std::f64::consts::PI);
    let (mut lo, mut hi) = (theta - 2.0 * std::f64::consts::PI, theta);
    for _ in 0..200 {
        let prop = current * theta.cos() + &nu * theta.sin();
        if log_lik(&prop) > level {
            return Ok(prop);
        }
        if theta < 0.0 {
            lo = theta;
        } else {
            hi = theta;
        }
        theta = rng.random_range(lo..hi);
    }
    // The bracket has shrunk onto the current state.
    Ok(current.clone())
}

/// Sampler settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpConfig {
    /// Latent nodes p; defaults to the input dimension.
    pub latent_nodes: Option<usize>,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Larger training sets are uniformly subsampled to this size.
    pub max_n: usize,
    /// Random-walk step on log hyperparameters.
    pub mh_step: f64,
    /// Fixed diagonal added to the inner kernel.
    pub inner_nugget: f64,
    /// Fix the latent layer to the identity map.
    pub clamp_identity: bool,
    /// Fix the outer kernel hyperparameters.
    pub fixed_outer: Option<KernelParams>,
    /// Fix the inner length scale.
    pub fixed_inner_length_scale: Option<f64>,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            latent_nodes: None,
            iterations: 4000,
            burn_in: 2000,
            thin: 5,
            max_n: 1000,
            mh_step: 0.1,
            inner_nugget: 1e-6,
            clamp_identity: false,
            fixed_outer: None,
            fixed_inner_length_scale: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpDraw {
    /// Latent layer values at the training inputs (N × p).
    pub w: DMatrix<f64>,
    pub outer: KernelParams,
    pub inner_length_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpModel {
    pub format_version: u32,
    pub layers: u32,
    pub p: usize,
    pub train_x: DMatrix<f64>,
    /// Centred targets.
    pub train_y: DVector<f64>,
    pub y_mean: f64,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub inner_nugget: f64,
    /// Inner prior mean is the identity map (p = d).
    pub identity_mean: bool,
    pub subsample: Option<SubsampleRecord>,
    pub draws: Vec<DgpDraw>,
}

fn inner_params(l: f64, nugget: f64) -> KernelParams {
    KernelParams { length_scales: vec![l], signal_variance: 1.0, noise_variance: nugget }
}

fn gauss_loglik(w: &DMatrix<f64>, yc: &DVector<f64>, p: &KernelParams) -> f64 {
    let mut k = kernel_matrix(w, p);
    for i in 0..k.nrows() {
        k[(i, i)] += p.noise_variance;
    }
    match cholesky_jittered(&k, p.signal_variance) {
        Ok(c) => {
            let a = c.solve_lower(yc);
            -0.5 * a.norm_squared() - 0.5 * c.log_det() - 0.5 * yc.len() as f64 * (2.0 * std::f64::consts::PI).ln()
        }
        Err(_) => f64::NEG_INFINITY,
    }
}

/// Prior log density of the latent deviations under Σ(X).
fn latent_log_prior(f: &DMatrix<f64>, chol: &JitteredCholesky) -> f64 {
    let n = f.nrows() as f64;
    let mut s = 0.0;
    for c in f.column_iter() {
        let a = chol.solve_lower(&c.into_owned());
        s += -0.5 * a.norm_squared() - 0.5 * chol.log_det() - 0.5 * n * (2.0 * std::f64::consts::PI).ln();
    }
    s
}

fn log_normal_prior(v: f64, center: f64, sd: f64) -> f64 {
    let z = (v.ln() - center.ln()) / sd;
    -0.5 * z * z
}

/// Runs the Gibbs / elliptical-slice / Metropolis sampler.
pub fn fit(x: &DMatrix<f64>, y: &DVector<f64>, cfg: &DgpConfig) -> Result<DgpModel> {
    let (n0, d) = x.shape();
    if cfg.iterations <= cfg.burn_in {
        return Err(Error::arg(format!("iterations ({}) must exceed burn-in ({})", cfg.iterations, cfg.burn_in)));
    }
    if cfg.thin == 0 {
        return Err(Error::arg("thin must be at least 1"));
    }
    if n0 != y.len() || n0 < 2 || d == 0 {
        return Err(Error::arg("DGP needs at least 2 rows, matching targets, and one input column"));
    }
    let p = cfg.latent_nodes.unwrap_or(d);
    if p == 0 {
        return Err(Error::arg("DGP needs at least one latent node"));
    }
    if cfg.clamp_identity && p != d {
        return Err(Error::arg("identity clamp requires as many latent nodes as inputs"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (x, y, subsample) = if n0 > cfg.max_n {
        let mut idx = sample(&mut rng, n0, cfg.max_n).into_vec();
        idx.sort_unstable();
        info!("DGP training subsample: {} of {n0} rows", idx.len());
        (select_rows(x, &idx), DVector::from_fn(idx.len(), |i, _| y[idx[i]]), Some(SubsampleRecord { original_n: n0, used_n: idx.len(), seed: cfg.seed }))
    } else {
        (x.clone(), y.clone(), None)
    };
    let n = x.nrows();
    let y_mean = y.mean();
    let yc = y.map(|v| v - y_mean);
    let identity_mean = p == d;
    let mean_w = if identity_mean { x.clone() } else { DMatrix::zeros(n, p) };

    let mut outer = match &cfg.fixed_outer {
        Some(o) => {
            o.validate()?;
            if !o.is_isotropic() {
                return Err(Error::arg("outer kernel must be isotropic"));
            }
            o.clone()
        }
        None => default_init(&mean_w, &y, false),
    };
    let outer0 = outer.clone();
    let mut inner_l = cfg.fixed_inner_length_scale.unwrap_or(1.0);
    if !(inner_l > 0.0) {
        return Err(Error::arg("inner length scale must be positive"));
    }
    let inner_l0 = inner_l;
    let mut inner_chol = cholesky_jittered(&kernel_matrix(&x, &inner_params(inner_l, cfg.inner_nugget)), 1.0)?;
    let mut dev = DMatrix::<f64>::zeros(n, p);
    let mut w = &mean_w + &dev;
    let mut ll = gauss_loglik(&w, &yc, &outer);
    if !ll.is_finite() {
        return Err(Error::numerical("initial DGP likelihood is not finite"));
    }

    let retained = (cfg.iterations - cfg.burn_in) / cfg.thin;
    let mut draws = Vec::with_capacity(retained);
    let (mut acc_outer, mut acc_inner) = (0usize, 0usize);
    for it in 0..cfg.iterations {
        if !cfg.clamp_identity {
            let factor = inner_chol.l();
            for k in 0..p {
                let cur = dev.column(k).into_owned();
                let base_w = w.clone();
                let next = ess_step(
                    &cur,
                    &factor,
                    |f: &DVector<f64>| {
                        let mut wk = base_w.clone();
                        for i in 0..n {
                            wk[(i, k)] = mean_w[(i, k)] + f[i];
                        }
                        gauss_loglik(&wk, &yc, &outer)
                    },
                    &mut rng,
                )?;
                dev.set_column(k, &next);
                for i in 0..n {
                    w[(i, k)] = mean_w[(i, k)] + next[i];
                }
            }
            ll = gauss_loglik(&w, &yc, &outer);

            if cfg.fixed_inner_length_scale.is_none() {
                let prop = inner_l * (cfg.mh_step * rng.sample::<f64, _>(StandardNormal)).exp();
                if let Ok(pc) = cholesky_jittered(&kernel_matrix(&x, &inner_params(prop, cfg.inner_nugget)), 1.0) {
                    // The random walk is symmetric in log space; the Jacobian enters as log(prop/cur).
                    let a = latent_log_prior(&dev, &pc) + log_normal_prior(prop, inner_l0, 1.0) + prop.ln()
                        - latent_log_prior(&dev, &inner_chol)
                        - log_normal_prior(inner_l, inner_l0, 1.0)
                        - inner_l.ln();
                    if rng.random::<f64>().ln() < a {
                        inner_l = prop;
                        inner_chol = pc;
                        acc_inner += 1;
                    }
                }
            }
        }

        if cfg.fixed_outer.is_none() {
            let step = |v: f64, r: &mut ChaCha8Rng| v * (cfg.mh_step * r.sample::<f64, _>(StandardNormal)).exp();
            let prop = KernelParams {
                length_scales: vec![step(outer.length_scales[0], &mut rng)],
                signal_variance: step(outer.signal_variance, &mut rng),
                noise_variance: step(outer.noise_variance, &mut rng),
            };
            let lp = |q: &KernelParams| {
                log_normal_prior(q.length_scales[0], outer0.length_scales[0], 2.0)
                    + log_normal_prior(q.signal_variance, outer0.signal_variance, 3.0)
                    + log_normal_prior(q.noise_variance, outer0.noise_variance, 3.0)
                    + q.length_scales[0].ln()
                    + q.signal_variance.ln()
                    + q.noise_variance.ln()
            };
            let lprop = gauss_loglik(&w, &yc, &prop);
            if lprop.is_finite() && rng.random::<f64>().ln() < lprop + lp(&prop) - ll - lp(&outer) {
                outer = prop;
                ll = lprop;
                acc_outer += 1;
            }
        }

        if it >= cfg.burn_in && (it - cfg.burn_in) % cfg.thin == 0 && draws.len() < retained {
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::Sampler(format!("non-finite latent values at iteration {it}")));
            }
            draws.push(DgpDraw { w: w.clone(), outer: outer.clone(), inner_length_scale: inner_l });
        }
        if it % 500 == 0 {
            debug!("dgp iteration {it}: loglik {ll:.3}, outer {outer:?}, inner l {inner_l:.3}");
        }
    }
    debug!("dgp acceptance: outer {acc_outer}/{}, inner {acc_inner}/{}", cfg.iterations, cfg.iterations);
    Ok(DgpModel {
        format_version: FORMAT_VERSION,
        layers: LAYERS,
        p,
        train_x: x,
        train_y: yc,
        y_mean,
        iterations: cfg.iterations,
        burn_in: cfg.burn_in,
        thin: cfg.thin,
        inner_nugget: cfg.inner_nugget,
        identity_mean,
        subsample,
        draws,
    })
}

/// Per-draw predictive moments and their pooled mean and variance.
#[derive(Debug, Clone, PartialEq)]
pub struct DgpPrediction {
    pub mean: DVector<f64>,
    pub var: DVector<f64>,
    /// `draw_means[(i, draw)]`.
    pub draw_means: DMatrix<f64>,
    pub draw_vars: DMatrix<f64>,
}

/// Pools per-draw moments by the law of total variance.
pub fn pool_moments(means: &DMatrix<f64>, vars: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>) {
    let (m, k) = means.shape();
    let kf = k as f64;
    let mean = DVector::from_fn(m, |i, _| means.row(i).sum() / kf);
    let var = DVector::from_fn(m, |i, _| {
        let within = vars.row(i).sum() / kf;
        let between = means.row(i).iter().map(|v| (v - mean[i]).powi(2)).sum::<f64>() / kf;
        within + between
    });
    (mean, var)
}

impl DgpModel {
    /// Latent values at new inputs: inner kriging mean per draw.
    fn latent_at(&self, draw: &DgpDraw, x_new: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let n = self.train_x.nrows();
        let mut w_new = if self.identity_mean { x_new.clone() } else { DMatrix::zeros(x_new.nrows(), self.p) };
        let mean_w = if self.identity_mean { self.train_x.clone() } else { DMatrix::zeros(n, self.p) };
        let dev = &draw.w - &mean_w;
        if dev.amax() == 0.0 {
            return Ok(w_new);
        }
        let ip = inner_params(draw.inner_length_scale, self.inner_nugget);
        let chol = cholesky_jittered(&kernel_matrix(&self.train_x, &ip), 1.0)?;
        let ks = cross_kernel(x_new, &self.train_x, &KernelParams { noise_variance: 0.0, ..ip });
        for k in 0..self.p {
            let a = chol.solve(&dev.column(k).into_owned());
            let add = &ks * a;
            for i in 0..x_new.nrows() {
                w_new[(i, k)] += add[i];
            }
        }
        Ok(w_new)
    }

    pub fn predict(&self, x_new: &DMatrix<f64>) -> Result<DgpPrediction> {
        if x_new.ncols() != self.train_x.ncols() {
            return Err(Error::arg(format!("expected {} input columns, got {}", self.train_x.ncols(), x_new.ncols())));
        }
        if self.draws.is_empty() {
            return Err(Error::arg("model has no retained draws"));
        }
        let m = x_new.nrows();
        let k = self.draws.len();
        let mut means = DMatrix::zeros(m, k);
        let mut vars = DMatrix::zeros(m, k);
        if m > 0 {
            let cols: Vec<Result<(DVector<f64>, DVector<f64>)>> = {
                use rayon::prelude::*;
                self.draws
                    .par_iter()
                    .map(|d| {
                        let w_new = self.latent_at(d, x_new)?;
                        let yfull = self.train_y.map(|v| v + self.y_mean);
                        let gp = GpModel::condition(&d.w, &yfull, &d.outer)?;
                        gp.predict(&w_new)
                    })
                    .collect()
            };
            for (c, r) in cols.into_iter().enumerate() {
                let (mu, v) = r?;
                means.set_column(c, &mu);
                vars.set_column(c, &v);
            }
        }
        let (mean, var) = pool_moments(&means, &vars);
        Ok(DgpPrediction { mean, var, draw_means: means, draw_vars: vars })
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let m: Self = serde_json::from_reader(std::io::BufReader::new(f))?;
        if m.format_version != FORMAT_VERSION || m.layers != LAYERS {
            return Err(Error::Spec(format!("unsupported DGP archive (version {}, layers {})", m.format_version, m.layers)));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_rules() {
        let (m, v) = pool_moments(&DMatrix::from_element(1, 1, 3.0), &DMatrix::from_element(1, 1, 2.0));
        assert_eq!((m[0], v[0]), (3.0, 2.0));
        let (m, v) = pool_moments(&DMatrix::from_element(1, 2, 3.0), &DMatrix::from_element(1, 2, 2.0));
        assert_eq!((m[0], v[0]), (3.0, 2.0));
        let (m, v) = pool_moments(&DMatrix::from_row_slice(1, 2, &[1.0, 3.0]), &DMatrix::from_element(1, 2, 2.0));
        assert_eq!((m[0], v[0]), (2.0, 3.0));
    }

    #[test]
    fn ess_rejects_non_finite_current() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = DMatrix::identity(2, 2);
        let e = ess_step(&DVector::zeros(2), &l, |_| f64::NAN, &mut rng).unwrap_err();
        assert!(matches!(e, Error::Sampler(_)));
    }

    #[test]
    fn ess_is_deterministic_under_seed() {
        let l = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 0.8]);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mut f = DVector::zeros(2);
            for _ in 0..50 {
                f = ess_step(&f, &l, |v| -0.5 * (v[0] - 1.0).powi(2), &mut rng).unwrap();
            }
            f
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn burn_in_must_be_below_iterations() {
        let x = DMatrix::from_fn(5, 1, |i, _| i as f64);
        let y = DVector::from_fn(5, |i, _| i as f64);
        let cfg = DgpConfig { iterations: 10, burn_in: 10, ..Default::default() };
        assert!(matches!(fit(&x, &y, &cfg), Err(Error::Argument(_))));
    }

    #[test]
    fn retained_draw_count() {
        let x = DMatrix::from_fn(12, 1, |i, _| i as f64 / 4.0);
        let y = DVector::from_fn(12, |i, _| (i as f64 / 4.0).sin());
        let cfg = DgpConfig { iterations: 60, burn_in: 20, thin: 5, seed: 3, ..Default::default() };
        let m = fit(&x, &y, &cfg).unwrap();
        assert_eq!(m.draws.len(), 8);
        assert!(m.draws.iter().all(|d| d.w.iter().all(|v| v.is_finite()) && d.outer.validate().is_ok() && d.inner_length_scale > 0.0));
        let again = fit(&x, &y, &cfg).unwrap();
        assert_eq!(m, again);
    }
}
