//! Bayesian structural time series: a linear-Gaussian state space with a
//! spike-and-slab regression, fitted by Gibbs sampling, forecast as a
//! mixture over posterior draws.

use std::fs;
use std::path::Path;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dataset::{design_matrix, Covariate, Standardizer, TimeSeriesFrame};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_jittered, symmetrize};
use crate::quantile::QuantileForecast;

pub const FORMAT_VERSION: u32 = 1;

/// Which structural blocks make up the state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Components {
    pub level: bool,
    pub slope: bool,
    /// Number of seasons of a dummy seasonal block (e.g. 24 for hourly data).
    pub seasonal: Option<usize>,
}

impl Default for Components {
    fn default() -> Self {
        Self { level: true, slope: true, seasonal: Some(24) }
    }
}

/// Linear-Gaussian state space
/// `y_t = Zᵀα_t + βᵀx_t + ε_t`, `α_{t+1} = Tα_t + Rη_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSpaceSpec {
    pub components: Components,
    pub t: DMatrix<f64>,
    pub z: DVector<f64>,
    pub r: DMatrix<f64>,
    /// Variance of each disturbance η (diagonal Q).
    pub state_noise_var: Vec<f64>,
    /// Variance of ε.
    pub obs_noise_var: f64,
    pub initial_mean: DVector<f64>,
    pub initial_cov: DMatrix<f64>,
}

impl StateSpaceSpec {
    pub fn new(
        t: DMatrix<f64>,
        z: DVector<f64>,
        r: DMatrix<f64>,
        state_noise_var: Vec<f64>,
        obs_noise_var: f64,
        initial_mean: DVector<f64>,
        initial_cov: DMatrix<f64>,
    ) -> Result<Self> {
        let s = Self {
            components: Components { level: false, slope: false, seasonal: None },
            t,
            z,
            r,
            state_noise_var,
            obs_noise_var,
            initial_mean,
            initial_cov,
        };
        s.validate()?;
        Ok(s)
    }

    /// Structural model from components, with a diffuse-ish initial state.
    pub fn structural(components: Components, initial_level: f64, initial_var: f64) -> Result<Self> {
        let mut blocks: Vec<(DMatrix<f64>, DVector<f64>, usize)> = Vec::new();
        if components.level && components.slope {
            blocks.push((DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]), DVector::from_vec(vec![1.0, 0.0]), 2));
        } else if components.level {
            blocks.push((DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, 1.0), 1));
        } else if components.slope {
            return Err(Error::Spec("a slope component requires a level component".into()));
        }
        if let Some(s) = components.seasonal {
            if s < 2 {
                return Err(Error::Spec(format!("seasonal period {s} must be at least 2")));
            }
            let m = s - 1;
            let mut t = DMatrix::zeros(m, m);
            t.row_mut(0).fill(-1.0);
            for i in 1..m {
                t[(i, i - 1)] = 1.0;
            }
            let mut z = DVector::zeros(m);
            z[0] = 1.0;
            blocks.push((t, z, 1));
        }
        if blocks.is_empty() {
            return Err(Error::Spec("state space needs at least one component".into()));
        }
        let m: usize = blocks.iter().map(|b| b.0.nrows()).sum();
        let q: usize = blocks.iter().map(|b| b.2).sum();
        let mut t = DMatrix::zeros(m, m);
        let mut z = DVector::zeros(m);
        let mut r = DMatrix::zeros(m, q);
        let (mut off, mut qoff) = (0, 0);
        for (bt, bz, nq) in &blocks {
            let k = bt.nrows();
            t.view_mut((off, off), (k, k)).copy_from(bt);
            z.rows_mut(off, k).copy_from(bz);
            for j in 0..*nq {
                r[(off + j, qoff + j)] = 1.0;
            }
            off += k;
            qoff += nq;
        }
        let mut a0 = DVector::zeros(m);
        if components.level {
            a0[0] = initial_level;
        }
        let spec = Self {
            components,
            t,
            z,
            r,
            state_noise_var: vec![1.0; q],
            obs_noise_var: 1.0,
            initial_mean: a0,
            initial_cov: DMatrix::identity(m, m) * initial_var,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn state_dim(&self) -> usize {
        self.t.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.t.nrows();
        let bad = |what: &str| Err(Error::Spec(format!("state space dimension mismatch: {what}")));
        if self.t.ncols() != m {
            return bad("T not square");
        }
        if self.z.len() != m {
            return bad("Z length");
        }
        if self.r.nrows() != m || self.r.ncols() != self.state_noise_var.len() {
            return bad("R shape");
        }
        if self.initial_mean.len() != m || self.initial_cov.shape() != (m, m) {
            return bad("initial state");
        }
        if self.state_noise_var.iter().any(|v| !(*v >= 0.0)) || !(self.obs_noise_var >= 0.0) {
            return Err(Error::Spec("variances must be non-negative".into()));
        }
        Ok(())
    }

    /// R Q Rᵀ.
    pub fn state_noise_cov(&self) -> DMatrix<f64> {
        let q = DMatrix::from_diagonal(&DVector::from_column_slice(&self.state_noise_var));
        &self.r * q * self.r.transpose()
    }

    fn with_variances(&self, state_noise_var: &[f64], obs_noise_var: f64) -> Self {
        let mut s = self.clone();
        s.state_noise_var = state_noise_var.to_vec();
        s.obs_noise_var = obs_noise_var;
        s
    }
}

/// Sparse view of T used by the inner loops.
struct Sparse {
    entries: Vec<(usize, usize, f64)>,
    m: usize,
}

impl Sparse {
    fn new(t: &DMatrix<f64>) -> Self {
        let mut entries = Vec::new();
        for i in 0..t.nrows() {
            for j in 0..t.ncols() {
                if t[(i, j)] != 0.0 {
                    entries.push((i, j, t[(i, j)]));
                }
            }
        }
        Self { entries, m: t.nrows() }
    }

    fn mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.m);
        for &(i, j, x) in &self.entries {
            out[i] += x * v[j];
        }
        out
    }

    fn tr_mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.m);
        for &(i, j, x) in &self.entries {
            out[j] += x * v[i];
        }
        out
    }

    /// T P Tᵀ.
    fn sandwich(&self, p: &DMatrix<f64>) -> DMatrix<f64> {
        let m = self.m;
        let mut tp = DMatrix::<f64>::zeros(m, m);
        for &(i, j, x) in &self.entries {
            for c in 0..m {
                tp[(i, c)] += x * p[(j, c)];
            }
        }
        let mut out = DMatrix::zeros(m, m);
        for &(i, j, x) in &self.entries {
            for rr in 0..m {
                out[(rr, i)] += x * tp[(rr, j)];
            }
        }
        out
    }
}

/// Filter state at one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    /// Predicted state mean for the next observation.
    pub mean: DVector<f64>,
    /// Predicted state covariance for the next observation.
    pub cov: DMatrix<f64>,
    pub filtered_mean: DVector<f64>,
    pub filtered_cov: DMatrix<f64>,
    /// Update gain `P Z / F` of the last step.
    pub gain: DVector<f64>,
    pub innovation: f64,
    pub innovation_var: f64,
}

impl KalmanState {
    pub fn initial(spec: &StateSpaceSpec) -> Self {
        Self::from_prior(spec.initial_mean.clone(), spec.initial_cov.clone())
    }

    pub fn from_prior(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        let m = mean.len();
        Self {
            filtered_mean: mean.clone(),
            filtered_cov: cov.clone(),
            mean,
            cov,
            gain: DVector::zeros(m),
            innovation: 0.0,
            innovation_var: f64::NAN,
        }
    }
}

fn regression_term(regressors: &[f64], beta: &[f64]) -> Result<f64> {
    if regressors.len() != beta.len() {
        return Err(Error::arg(format!("{} regressors for {} coefficients", regressors.len(), beta.len())));
    }
    Ok(regressors.iter().zip(beta).map(|(a, b)| a * b).sum())
}

fn predict(spec: &StateSpaceSpec, mean: &DVector<f64>, cov: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let a = &spec.t * mean;
    let mut p = &spec.t * cov * spec.t.transpose() + spec.state_noise_cov();
    symmetrize(&mut p);
    (a, p)
}

/// Updates with one observation, then predicts the next state.
/// Returns the new state and the Gaussian log-likelihood of the innovation.
pub fn kalman_step(state: &KalmanState, spec: &StateSpaceSpec, observation: f64, regressors: &[f64], beta: &[f64]) -> Result<(KalmanState, f64)> {
    if !observation.is_finite() {
        return Err(Error::arg("non-finite observation; use kalman_skip for missing values"));
    }
    let xb = regression_term(regressors, beta)?;
    let pz = &state.cov * &spec.z;
    let f = spec.z.dot(&pz) + spec.obs_noise_var;
    if !(f > 0.0) || !f.is_finite() {
        return Err(Error::numerical(format!("innovation variance {f} is not positive")));
    }
    let v = observation - xb - spec.z.dot(&state.mean);
    let k = &pz / f;
    let filtered_mean = &state.mean + &k * v;
    let mut filtered_cov = &state.cov - &k * pz.transpose();
    symmetrize(&mut filtered_cov);
    let (mean, cov) = predict(spec, &filtered_mean, &filtered_cov);
    let ll = -0.5 * ((2.0 * std::f64::consts::PI * f).ln() + v * v / f);
    Ok((KalmanState { mean, cov, filtered_mean, filtered_cov, gain: k, innovation: v, innovation_var: f }, ll))
}

/// Prediction-only step for a missing observation.
pub fn kalman_skip(state: &KalmanState, spec: &StateSpaceSpec) -> KalmanState {
    let (mean, cov) = predict(spec, &state.mean, &state.cov);
    KalmanState {
        filtered_mean: state.mean.clone(),
        filtered_cov: state.cov.clone(),
        mean,
        cov,
        gain: DVector::zeros(state.mean.len()),
        innovation: 0.0,
        innovation_var: f64::NAN,
    }
}

/// Filter log-likelihood of `y` (NaN entries treated as missing).
pub fn kalman_loglik(spec: &StateSpaceSpec, y: &[f64], x: &DMatrix<f64>, beta: &[f64]) -> Result<f64> {
    if x.nrows() != y.len() {
        return Err(Error::arg("regressor rows differ from observations"));
    }
    let mut st = KalmanState::initial(spec);
    let mut ll = 0.0;
    for (t, &obs) in y.iter().enumerate() {
        if obs.is_finite() {
            let row: Vec<f64> = x.row(t).iter().copied().collect();
            let (next, inc) = kalman_step(&st, spec, obs, &row, beta)?;
            st = next;
            ll += inc;
        } else {
            st = kalman_skip(&st, spec);
        }
    }
    Ok(ll)
}

/// Conjugate spike-and-slab prior
/// `β_δ | σ² ~ N(b_δ, σ² Ω_δ⁻¹)`, `σ² ~ InvGamma(shape, scale)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeSlabPrior {
    pub inclusion_prob: Vec<f64>,
    pub slab_mean: DVector<f64>,
    pub slab_precision: DMatrix<f64>,
    pub sigma_shape: f64,
    pub sigma_scale: f64,
}

impl SpikeSlabPrior {
    /// Default prior: Ω = κ(w XᵀX + (1-w) diag XᵀX)/N, residual variance
    /// guess (1 - R²)·var(y) worth `df` observations.
    pub fn default_for(x: &DMatrix<f64>, y: &[f64], inclusion: f64, kappa: f64, expected_r2: f64, df: f64) -> Result<Self> {
        let (n, p) = x.shape();
        if n == 0 {
            return Err(Error::arg("empty design"));
        }
        let xtx = x.transpose() * x;
        let w = 0.5;
        let mut omega = DMatrix::from_fn(p, p, |i, j| if i == j { xtx[(i, i)] } else { w * xtx[(i, j)] }) * (kappa / n as f64);
        for i in 0..p {
            if omega[(i, i)] <= 0.0 {
                omega[(i, i)] = kappa;
            }
        }
        let mean = y.iter().sum::<f64>() / n as f64;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
        let s2 = ((1.0 - expected_r2) * var).max(1e-12);
        let prior = Self {
            inclusion_prob: vec![inclusion; p],
            slab_mean: DVector::zeros(p),
            slab_precision: omega,
            sigma_shape: df / 2.0,
            sigma_scale: df * s2 / 2.0,
        };
        prior.validate()?;
        Ok(prior)
    }

    pub fn dim(&self) -> usize {
        self.inclusion_prob.len()
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.dim();
        if self.inclusion_prob.iter().any(|q| !(0.0..=1.0).contains(q)) {
            return Err(Error::arg("inclusion probabilities must lie in [0,1]"));
        }
        if self.slab_mean.len() != p || self.slab_precision.shape() != (p, p) {
            return Err(Error::arg("slab dimensions differ from the inclusion vector"));
        }
        if p > 0 && self.slab_precision.clone().cholesky().is_none() {
            return Err(Error::arg("slab precision is not positive definite"));
        }
        if !(self.sigma_shape > 0.0 && self.sigma_scale > 0.0) {
            return Err(Error::arg("residual variance prior needs positive shape and scale"));
        }
        Ok(())
    }
}

/// Sufficient statistics of a regression of `y` on `X`.
struct Suff {
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    yty: f64,
    n: usize,
}

impl Suff {
    fn new(x: &DMatrix<f64>, y: &DVector<f64>) -> Self {
        Self { xtx: x.transpose() * x, xty: x.transpose() * y, yty: y.dot(y), n: y.len() }
    }
}

struct Posterior {
    support: Vec<usize>,
    /// Cholesky of V⁻¹ = X_δᵀX_δ + Ω_δ.
    chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    mean: DVector<f64>,
    shape: f64,
    scale: f64,
    log_marginal: f64,
}

fn sub(m: &DMatrix<f64>, s: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(s.len(), s.len(), |i, j| m[(s[i], s[j])])
}

fn subv(v: &DVector<f64>, s: &[usize]) -> DVector<f64> {
    DVector::from_iterator(s.len(), s.iter().map(|&i| v[i]))
}

fn posterior(suff: &Suff, prior: &SpikeSlabPrior, delta: &[bool]) -> Result<Posterior> {
    let support: Vec<usize> = (0..delta.len()).filter(|&j| delta[j]).collect();
    let shape = prior.sigma_shape + suff.n as f64 / 2.0;
    if support.is_empty() {
        let scale = prior.sigma_scale + suff.yty / 2.0;
        let lp: f64 = prior.inclusion_prob.iter().map(|&q| (1.0 - q).ln()).sum();
        return Ok(Posterior { support, chol: None, mean: DVector::zeros(0), shape, scale, log_marginal: -shape * scale.ln() + lp });
    }
    let om = sub(&prior.slab_precision, &support);
    let b = subv(&prior.slab_mean, &support);
    let prec = sub(&suff.xtx, &support) + &om;
    let chol = match prec.clone().cholesky() {
        Some(c) => c,
        None => {
            let scale = prec.diagonal().amax().max(1e-300);
            let mut j = prec.clone();
            for i in 0..j.nrows() {
                j[(i, i)] += 1e-10 * scale;
            }
            j.cholesky().ok_or_else(|| Error::numerical("singular on-support posterior precision"))?
        }
    };
    let omb = &om * &b;
    let rhs = subv(&suff.xty, &support) + &omb;
    let mean = chol.solve(&rhs);
    let ss = 2.0 * prior.sigma_scale + suff.yty + b.dot(&omb) - mean.dot(&rhs);
    let scale = (ss / 2.0).max(1e-300);
    let om_chol = om.cholesky().ok_or_else(|| Error::arg("slab precision is not positive definite"))?;
    let logdet = |c: &nalgebra::Cholesky<f64, nalgebra::Dyn>| 2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let lp: f64 = prior
        .inclusion_prob
        .iter()
        .zip(delta)
        .map(|(&q, &d)| if d { q.ln() } else { (1.0 - q).ln() })
        .sum();
    let log_marginal = 0.5 * logdet(&om_chol) - 0.5 * logdet(&chol) - shape * scale.ln() + lp;
    Ok(Posterior { support, chol: Some(chol), mean, shape, scale, log_marginal })
}

/// Unnormalized log posterior probability of an inclusion vector, with β and
/// σ² integrated out.
pub fn log_model_posterior(x: &DMatrix<f64>, y: &[f64], prior: &SpikeSlabPrior, delta: &[bool]) -> Result<f64> {
    let suff = Suff::new(x, &DVector::from_column_slice(y));
    Ok(posterior(&suff, prior, delta)?.log_marginal)
}

fn draw_inv_gamma<R: Rng>(shape: f64, scale: f64, rng: &mut R) -> Result<f64> {
    let g = Gamma::new(shape, 1.0).map_err(|e| Error::Sampler(format!("gamma({shape}) draw: {e}")))?;
    let v = scale / rng.sample(g);
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(Error::Sampler(format!("non-finite inverse-gamma draw (shape {shape}, scale {scale})")))
    }
}

fn spike_slab_suff<R: Rng>(suff: &Suff, prior: &SpikeSlabPrior, delta: &mut [bool], rng: &mut R) -> Result<(Vec<f64>, f64)> {
    let p = prior.dim();
    for j in 0..p {
        let q = prior.inclusion_prob[j];
        if q <= 0.0 {
            delta[j] = false;
            continue;
        }
        if q >= 1.0 {
            delta[j] = true;
            continue;
        }
        delta[j] = true;
        let l1 = posterior(suff, prior, delta)?.log_marginal;
        delta[j] = false;
        let l0 = posterior(suff, prior, delta)?.log_marginal;
        let p1 = 1.0 / (1.0 + (l0 - l1).exp());
        delta[j] = rng.random::<f64>() < p1;
    }
    let post = posterior(suff, prior, delta)?;
    let sigma2 = draw_inv_gamma(post.shape, post.scale, rng)?;
    let mut beta = vec![0.0; p];
    if let Some(chol) = &post.chol {
        let k = post.support.len();
        let z = DVector::from_iterator(k, (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)));
        // L Lᵀ = V⁻¹, so Lᵀ u = z gives u ~ N(0, V).
        let u = chol.l().transpose().solve_upper_triangular(&z).ok_or_else(|| Error::numerical("triangular solve failed"))?;
        let draw = &post.mean + u * sigma2.sqrt();
        for (i, &j) in post.support.iter().enumerate() {
            beta[j] = draw[i];
        }
    }
    Ok((beta, sigma2))
}

/// One Gibbs draw of (δ, β, σ²) for a regression of `targets` on `design`.
pub fn spike_slab_draw<R: Rng>(design: &DMatrix<f64>, targets: &[f64], prior: &SpikeSlabPrior, delta: &mut [bool], rng: &mut R) -> Result<(Vec<f64>, f64)> {
    if design.ncols() != prior.dim() || delta.len() != prior.dim() {
        return Err(Error::arg(format!("design has {} columns, prior has {}", design.ncols(), prior.dim())));
    }
    if design.nrows() != targets.len() {
        return Err(Error::arg("design rows differ from targets"));
    }
    let suff = Suff::new(design, &DVector::from_column_slice(targets));
    spike_slab_suff(&suff, prior, delta, rng)
}

/// Prior on a state disturbance variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariancePrior {
    InverseGamma { shape: f64, scale: f64 },
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BstsConfig {
    pub components: Components,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Train only on the most recent rows when set.
    pub window_hours: Option<usize>,
    pub seed: u64,
    pub inclusion_prob: f64,
    /// Prior sample size scaling the slab precision.
    pub slab_kappa: f64,
    pub expected_r2: f64,
    pub prior_df: f64,
    /// State standard-deviation guess as a fraction of sd(y).
    pub sigma_guess: f64,
    /// Overrides the default inverse-gamma prior for every disturbance.
    pub state_prior: Option<VariancePrior>,
}

impl Default for BstsConfig {
    fn default() -> Self {
        Self {
            components: Components::default(),
            iterations: 2000,
            burn_in: 500,
            thin: 1,
            window_hours: None,
            seed: 0,
            inclusion_prob: 0.5,
            slab_kappa: 0.01,
            expected_r2: 0.5,
            prior_df: 0.01,
            sigma_guess: 0.01,
            state_prior: None,
        }
    }
}

impl BstsConfig {
    pub fn retained(&self) -> usize {
        (self.iterations - self.burn_in) / self.thin.max(1)
    }
}

/// One retained posterior draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BstsDraw {
    pub beta: Vec<f64>,
    pub delta: Vec<bool>,
    pub obs_var: f64,
    pub state_vars: Vec<f64>,
    /// Sampled state at the last training time.
    pub final_state: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BstsModel {
    pub format_version: u32,
    pub spec: StateSpaceSpec,
    pub prior: SpikeSlabPrior,
    pub config: BstsConfig,
    pub features: Vec<String>,
    pub standardizer: Option<Standardizer>,
    pub n_train: usize,
    #[serde(skip)]
    pub draws: Vec<BstsDraw>,
}

/// Pre-computed pieces of the sampler for a fixed spec.
struct Smoother<'a> {
    spec: &'a StateSpaceSpec,
    t: Sparse,
    /// Index of the state each disturbance enters (R is a selection matrix).
    dist_state: Vec<usize>,
}

impl<'a> Smoother<'a> {
    fn new(spec: &'a StateSpaceSpec) -> Result<Self> {
        let mut dist_state = Vec::new();
        for c in 0..spec.r.ncols() {
            let nz: Vec<usize> = (0..spec.r.nrows()).filter(|&i| spec.r[(i, c)] != 0.0).collect();
            if nz.len() != 1 || spec.r[(nz[0], c)] != 1.0 {
                return Err(Error::Spec("sampler requires R to be a selection matrix".into()));
            }
            dist_state.push(nz[0]);
        }
        Ok(Self { spec, t: Sparse::new(&spec.t), dist_state })
    }

    fn rqr(&self, q: &[f64]) -> DMatrix<f64> {
        let m = self.t.m;
        let mut out = DMatrix::zeros(m, m);
        for (k, &s) in self.dist_state.iter().enumerate() {
            out[(s, s)] += q[k];
        }
        out
    }

    /// Fast state smoother E[α | y] with initial mean `a1`.
    fn smooth(&self, y: &[f64], a1: &DVector<f64>, q: &[f64], h: f64) -> Result<Vec<DVector<f64>>> {
        let n = y.len();
        let z = &self.spec.z;
        let rqr = self.rqr(q);
        let mut a = a1.clone();
        let mut p = self.spec.initial_cov.clone();
        let mut vs = Vec::with_capacity(n);
        let mut fs = Vec::with_capacity(n);
        let mut ks: Vec<DVector<f64>> = Vec::with_capacity(n);
        for &obs in y {
            let mut tp = self.t.sandwich(&p);
            if obs.is_finite() {
                let m = &p * z;
                let f = z.dot(&m) + h;
                if !(f > 0.0) || !f.is_finite() {
                    return Err(Error::numerical(format!("innovation variance {f} in smoother")));
                }
                let v = obs - z.dot(&a);
                let k = self.t.mul_vec(&m) / f;
                a = self.t.mul_vec(&a) + &k * v;
                tp -= &k * k.transpose() * f;
                vs.push(v);
                fs.push(f);
                ks.push(k);
            } else {
                a = self.t.mul_vec(&a);
                vs.push(0.0);
                fs.push(f64::NAN);
                ks.push(DVector::zeros(a.len()));
            }
            p = tp + &rqr;
            symmetrize(&mut p);
        }
        let mut r = DVector::zeros(a1.len());
        let mut rs = vec![DVector::zeros(0); n + 1];
        for t in (0..n).rev() {
            rs[t + 1] = r.clone();
            let tr = self.t.tr_mul_vec(&r);
            r = if fs[t].is_finite() { tr - z * ks[t].dot(&r) + z * (vs[t] / fs[t]) } else { tr };
        }
        rs[0] = r;
        let mut out = Vec::with_capacity(n);
        let mut alpha = a1 + &self.spec.initial_cov * &rs[0];
        for t in 0..n {
            out.push(alpha.clone());
            if t + 1 < n {
                alpha = self.t.mul_vec(&alpha) + &rqr * &rs[t + 1];
            }
        }
        Ok(out)
    }

    /// Draw from p(α | y) by mean correction of an unconditional simulation.
    fn simulate<R: Rng>(&self, y: &[f64], q: &[f64], h: f64, rng: &mut R) -> Result<Vec<DVector<f64>>> {
        let n = y.len();
        let m = self.t.m;
        let p0 = cholesky_jittered(&self.spec.initial_cov, self.spec.initial_cov.diagonal().amax().max(1.0))?;
        let e = DVector::from_iterator(m, (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let mut alpha = &self.spec.initial_mean + p0.l() * e;
        let mut plus = Vec::with_capacity(n);
        let mut ystar = Vec::with_capacity(n);
        let hs = h.sqrt();
        let qs: Vec<f64> = q.iter().map(|v| v.sqrt()).collect();
        for &obs in y.iter() {
            let yp = self.spec.z.dot(&alpha) + hs * rng.sample::<f64, _>(StandardNormal);
            ystar.push(if obs.is_finite() { obs - yp } else { f64::NAN });
            let mut next = self.t.mul_vec(&alpha);
            for (k, &s) in self.dist_state.iter().enumerate() {
                next[s] += qs[k] * rng.sample::<f64, _>(StandardNormal);
            }
            plus.push(alpha);
            alpha = next;
        }
        let corr = self.smooth(&ystar, &DVector::zeros(m), q, h)?;
        Ok(plus.into_iter().zip(corr).map(|(a, c)| a + c).collect())
    }
}

fn check_config(cfg: &BstsConfig) -> Result<()> {
    if cfg.iterations <= cfg.burn_in {
        return Err(Error::arg(format!("iterations ({}) must exceed burn-in ({})", cfg.iterations, cfg.burn_in)));
    }
    if cfg.thin == 0 {
        return Err(Error::arg("thin must be at least 1"));
    }
    Ok(())
}

/// Gibbs sampler over states, regression and variances.
pub fn fit(y: &[f64], x: &DMatrix<f64>, features: &[String], cfg: &BstsConfig) -> Result<BstsModel> {
    check_config(cfg)?;
    if x.nrows() != y.len() || features.len() != x.ncols() {
        return Err(Error::arg("design, target and feature names disagree in size"));
    }
    let (y, x) = match cfg.window_hours {
        Some(w) if w < y.len() => {
            let start = y.len() - w;
            (&y[start..], x.rows(start, w).into_owned())
        }
        _ => (y, x.clone()),
    };
    let n = y.len();
    if n < 3 {
        return Err(Error::arg("BSTS needs at least 3 observations"));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::arg("BSTS training targets must be finite"));
    }
    let mean = y.iter().sum::<f64>() / n as f64;
    let var = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).max(1e-8);
    let spec0 = StateSpaceSpec::structural(cfg.components, y[0], 1e4 * var.max(1.0))?;
    let prior = SpikeSlabPrior::default_for(&x, y, cfg.inclusion_prob, cfg.slab_kappa, cfg.expected_r2, cfg.prior_df)?;
    fit_with(y, &x, features, &spec0, &prior, cfg)
}

/// Gibbs sampler with an explicit spec (its variances are starting values)
/// and prior.
pub fn fit_with(
    y: &[f64],
    x: &DMatrix<f64>,
    features: &[String],
    spec: &StateSpaceSpec,
    prior: &SpikeSlabPrior,
    cfg: &BstsConfig,
) -> Result<BstsModel> {
    check_config(cfg)?;
    spec.validate()?;
    prior.validate()?;
    let n = y.len();
    let p = x.ncols();
    if prior.dim() != p || x.nrows() != n {
        return Err(Error::arg("prior dimension or design rows disagree with the data"));
    }
    let mean = y.iter().sum::<f64>() / n as f64;
    let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64).sqrt().max(1e-8);
    let nq = spec.state_noise_var.len();
    let guess = cfg.sigma_guess * sd;
    let state_priors: Vec<VariancePrior> = (0..nq)
        .map(|_| {
            cfg.state_prior
                .unwrap_or(VariancePrior::InverseGamma { shape: cfg.prior_df / 2.0, scale: cfg.prior_df * guess * guess / 2.0 })
        })
        .collect();

    let sm = Smoother::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let suff_x = x.transpose() * x;
    let mut beta = vec![0.0; p];
    let mut delta = vec![false; p];
    let mut obs_var = (sd * sd * 0.5).max(1e-8);
    let mut state_vars: Vec<f64> = state_priors
        .iter()
        .map(|pr| match pr {
            VariancePrior::Fixed(v) => *v,
            VariancePrior::InverseGamma { .. } => guess * guess,
        })
        .collect();

    let mut draws = Vec::with_capacity(cfg.retained());
    for it in 0..cfg.iterations {
        let xb: Vec<f64> = (0..n).map(|t| (0..p).map(|j| x[(t, j)] * beta[j]).sum::<f64>()).collect();
        let target: Vec<f64> = y.iter().zip(&xb).map(|(a, b)| a - b).collect();
        let path = sm.simulate(&target, &state_vars, obs_var, &mut rng)?;

        let resid = DVector::from_iterator(n, (0..n).map(|t| y[t] - spec.z.dot(&path[t])));
        let suff = Suff { xtx: suff_x.clone(), xty: x.transpose() * &resid, yty: resid.dot(&resid), n };
        let (b, s2) = spike_slab_suff(&suff, prior, &mut delta, &mut rng)?;
        beta = b;
        obs_var = s2;

        for (k, pr) in state_priors.iter().enumerate() {
            state_vars[k] = match *pr {
                VariancePrior::Fixed(v) => v,
                VariancePrior::InverseGamma { shape, scale } => {
                    let s = sm.dist_state[k];
                    let mut ss = 0.0;
                    for t in 0..n - 1 {
                        let pred: f64 = sm.t.entries.iter().filter(|e| e.0 == s).map(|&(_, j, v)| v * path[t][j]).sum();
                        let eta = path[t + 1][s] - pred;
                        ss += eta * eta;
                    }
                    draw_inv_gamma(shape + (n - 1) as f64 / 2.0, scale + ss / 2.0, &mut rng)?
                }
            };
        }
        if !obs_var.is_finite() || state_vars.iter().any(|v| !v.is_finite()) {
            return Err(Error::Sampler(format!("non-finite variance draw at iteration {it}: obs {obs_var}, state {state_vars:?}")));
        }
        if it >= cfg.burn_in && (it - cfg.burn_in) % cfg.thin == 0 && draws.len() < cfg.retained() {
            draws.push(BstsDraw {
                beta: beta.clone(),
                delta: delta.clone(),
                obs_var,
                state_vars: state_vars.clone(),
                final_state: path[n - 1].iter().copied().collect(),
            });
        }
        if it % 100 == 0 {
            debug!("bsts iteration {it}: obs var {obs_var:.4}, state vars {state_vars:?}");
        }
    }
    Ok(BstsModel {
        format_version: FORMAT_VERSION,
        spec: spec.clone(),
        prior: prior.clone(),
        config: cfg.clone(),
        features: features.to_vec(),
        standardizer: None,
        n_train: n,
        draws,
    })
}

/// Fits on a training frame with standardized covariates.
pub fn fit_frame(train: &TimeSeriesFrame, features: &[Covariate], cfg: &BstsConfig) -> Result<BstsModel> {
    let design = design_matrix(train, features, true)?;
    let names: Vec<String> = features.iter().map(|f| f.name().to_string()).collect();
    let mut model = fit(design.y.as_slice(), &design.x, &names, cfg)?;
    model.standardizer = design.standardizer;
    Ok(model)
}

/// Gaussian belief about the state at the next time step.
#[derive(Debug, Clone, PartialEq)]
pub struct StateBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Per-step mixture of Gaussians over posterior draws (or models).
#[derive(Debug, Clone, PartialEq)]
pub struct BstsForecast {
    pub weights: Vec<f64>,
    /// `means[(step, component)]`.
    pub means: DMatrix<f64>,
    pub vars: DMatrix<f64>,
}

impl BstsForecast {
    pub fn horizon(&self) -> usize {
        self.means.nrows()
    }

    pub fn mean(&self) -> Vec<f64> {
        (0..self.horizon()).map(|h| self.weights.iter().enumerate().map(|(c, w)| w * self.means[(h, c)]).sum()).collect()
    }

    /// Law of total variance across components.
    pub fn variance(&self) -> Vec<f64> {
        let mu = self.mean();
        (0..self.horizon())
            .map(|h| {
                self.weights
                    .iter()
                    .enumerate()
                    .map(|(c, w)| w * (self.vars[(h, c)] + (self.means[(h, c)] - mu[h]).powi(2)))
                    .sum()
            })
            .collect()
    }

    pub fn cdf(&self, step: usize, v: f64) -> f64 {
        let mut s = 0.0;
        for (c, w) in self.weights.iter().enumerate() {
            let (m, var) = (self.means[(step, c)], self.vars[(step, c)]);
            s += w * if var > 0.0 {
                Normal::new(m, var.sqrt()).map(|d| d.cdf(v)).unwrap_or(if v >= m { 1.0 } else { 0.0 })
            } else if v >= m {
                1.0
            } else {
                0.0
            };
        }
        s
    }

    /// Mixture quantile by bisection.
    pub fn quantile(&self, step: usize, tau: f64) -> f64 {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for c in 0..self.weights.len() {
            let sd = self.vars[(step, c)].max(0.0).sqrt();
            lo = lo.min(self.means[(step, c)] - 10.0 * sd - 1e-9);
            hi = hi.max(self.means[(step, c)] + 10.0 * sd + 1e-9);
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.cdf(step, mid) < tau {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-10 * (1.0 + mid.abs()) {
                break;
            }
        }
        0.5 * (lo + hi)
    }

    pub fn quantiles(&self, levels: &[f64]) -> Result<QuantileForecast> {
        let values = DMatrix::from_fn(self.horizon(), levels.len(), |h, l| self.quantile(h, levels[l]));
        QuantileForecast::with_point(levels.to_vec(), values, self.mean())
    }
}

impl BstsModel {
    fn draw_spec(&self, d: &BstsDraw) -> StateSpaceSpec {
        self.spec.with_variances(&d.state_vars, d.obs_var)
    }

    /// Beliefs about the first post-training state, one per draw.
    pub fn origin_beliefs(&self) -> Vec<StateBelief> {
        self.draws
            .iter()
            .map(|d| {
                let s = self.draw_spec(d);
                let a = DVector::from_column_slice(&d.final_state);
                StateBelief { mean: &s.t * a, cov: s.state_noise_cov() }
            })
            .collect()
    }

    /// Kalman-updates each draw's belief with observed values (and their regressors).
    pub fn assimilate(&self, beliefs: &[StateBelief], y: &[f64], x: &DMatrix<f64>) -> Result<Vec<StateBelief>> {
        if beliefs.len() != self.draws.len() {
            return Err(Error::arg("one belief per draw required"));
        }
        if x.nrows() != y.len() || x.ncols() != self.prior.dim() {
            return Err(Error::arg("observation regressors have the wrong shape"));
        }
        beliefs
            .iter()
            .zip(&self.draws)
            .map(|(b, d)| {
                let spec = self.draw_spec(d);
                let mut st = KalmanState::from_prior(b.mean.clone(), b.cov.clone());
                for (t, &obs) in y.iter().enumerate() {
                    st = if obs.is_finite() {
                        let row: Vec<f64> = x.row(t).iter().copied().collect();
                        kalman_step(&st, &spec, obs, &row, &d.beta)?.0
                    } else {
                        kalman_skip(&st, &spec)
                    };
                }
                Ok(StateBelief { mean: st.mean, cov: st.cov })
            })
            .collect()
    }

    /// Forecast from given beliefs over `x_future.nrows()` steps.
    pub fn forecast_from(&self, beliefs: &[StateBelief], x_future: &DMatrix<f64>) -> Result<BstsForecast> {
        let h = x_future.nrows();
        if h == 0 {
            return Err(Error::arg("forecast horizon must be positive"));
        }
        if x_future.ncols() != self.prior.dim() {
            return Err(Error::arg(format!("{} future regressors, model has {}", x_future.ncols(), self.prior.dim())));
        }
        if self.draws.is_empty() || beliefs.len() != self.draws.len() {
            return Err(Error::arg("model has no draws or beliefs do not match draws"));
        }
        let k = self.draws.len();
        let mut means = DMatrix::zeros(h, k);
        let mut vars = DMatrix::zeros(h, k);
        let t = Sparse::new(&self.spec.t);
        for (c, (d, b)) in self.draws.iter().zip(beliefs).enumerate() {
            let spec = self.draw_spec(d);
            let rqr = spec.state_noise_cov();
            let (mut a, mut p) = (b.mean.clone(), b.cov.clone());
            for step in 0..h {
                let xb: f64 = (0..d.beta.len()).map(|j| x_future[(step, j)] * d.beta[j]).sum();
                means[(step, c)] = spec.z.dot(&a) + xb;
                vars[(step, c)] = spec.z.dot(&(&p * &spec.z)) + d.obs_var;
                a = t.mul_vec(&a);
                p = t.sandwich(&p) + &rqr;
            }
        }
        Ok(BstsForecast { weights: vec![1.0 / k as f64; k], means, vars })
    }

    /// Forecast `horizon` steps past the end of training.
    pub fn forecast(&self, horizon: usize, x_future: &DMatrix<f64>) -> Result<BstsForecast> {
        if horizon == 0 {
            return Err(Error::arg("forecast horizon must be positive"));
        }
        if x_future.nrows() != horizon {
            return Err(Error::arg(format!("{} future regressor rows for horizon {horizon}", x_future.nrows())));
        }
        self.forecast_from(&self.origin_beliefs(), x_future)
    }

    /// Keeps every `step`-th draw, for cheaper forecasting.
    pub fn thinned(&self, max_draws: usize) -> Self {
        let mut m = self.clone();
        if max_draws > 0 && self.draws.len() > max_draws {
            let step = self.draws.len().div_ceil(max_draws);
            m.draws = self.draws.iter().step_by(step).cloned().collect();
        }
        m
    }

    /// Posterior inclusion frequency of each regressor.
    pub fn inclusion_frequencies(&self) -> Vec<f64> {
        let p = self.prior.dim();
        let n = self.draws.len().max(1) as f64;
        (0..p).map(|j| self.draws.iter().filter(|d| d.delta[j]).count() as f64 / n).collect()
    }

    /// Writes `<stem>.draws.csv` (draw, parameter, value) and `<stem>.json`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(self)?)?;
        let mut w = csv::Writer::from_path(dir.join(format!("{stem}.draws.csv")))?;
        w.write_record(["draw", "parameter", "value"])?;
        for (i, d) in self.draws.iter().enumerate() {
            let id = i.to_string();
            let mut put = |name: String, v: f64| w.write_record([id.as_str(), name.as_str(), format!("{v}").as_str()]);
            for (j, b) in d.beta.iter().enumerate() {
                put(format!("beta[{j}]"), *b)?;
            }
            for (j, b) in d.delta.iter().enumerate() {
                put(format!("delta[{j}]"), if *b { 1.0 } else { 0.0 })?;
            }
            put("obs_var".into(), d.obs_var)?;
            for (j, v) in d.state_vars.iter().enumerate() {
                put(format!("state_var[{j}]"), *v)?;
            }
            for (j, v) in d.final_state.iter().enumerate() {
                put(format!("final_state[{j}]"), *v)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>, stem: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let mut m: Self = serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::arg(format!("unsupported BSTS archive version {}", m.format_version)));
        }
        let p = m.prior.dim();
        let nq = m.spec.state_noise_var.len();
        let ms = m.spec.state_dim();
        let mut r = csv::Reader::from_path(dir.join(format!("{stem}.draws.csv")))?;
        let mut draws: Vec<BstsDraw> = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let id: usize = rec[0].parse().map_err(|_| Error::arg("bad draw index"))?;
            let v: f64 = rec[2].parse().map_err(|_| Error::arg("bad draw value"))?;
            while draws.len() <= id {
                draws.push(BstsDraw { beta: vec![0.0; p], delta: vec![false; p], obs_var: 0.0, state_vars: vec![0.0; nq], final_state: vec![0.0; ms] });
            }
            let d = &mut draws[id];
            let name = &rec[1];
            let idx = |s: &str| -> Result<usize> {
                s.split_once('[').and_then(|(_, r)| r.strip_suffix(']')).and_then(|i| i.parse().ok()).ok_or_else(|| Error::arg(format!("bad parameter '{s}'")))
            };
            match name.split('[').next().unwrap_or("") {
                "beta" => d.beta[idx(name)?] = v,
                "delta" => d.delta[idx(name)?] = v != 0.0,
                "obs_var" => d.obs_var = v,
                "state_var" => d.state_vars[idx(name)?] = v,
                "final_state" => d.final_state[idx(name)?] = v,
                other => warn!("ignoring unknown BSTS parameter '{other}'"),
            }
        }
        m.draws = draws;
        Ok(m)
    }
}

/// Posterior model weights ∝ prior · exp(log marginal), computed stably.
pub fn bma_weights(log_marginals: &[f64], priors: &[f64]) -> Result<Vec<f64>> {
    if log_marginals.len() != priors.len() || priors.is_empty() {
        return Err(Error::arg("one prior per model required"));
    }
    if priors.iter().any(|p| !(*p >= 0.0)) || (priors.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::arg("model priors must be non-negative and sum to 1"));
    }
    let scores: Vec<f64> = log_marginals.iter().zip(priors).map(|(l, p)| if *p > 0.0 { l + p.ln() } else { f64::NEG_INFINITY }).collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return Err(Error::arg("no model has a finite log marginal likelihood"));
    }
    let w: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / total).collect())
}

/// Weighted mixture of model forecasts.
pub fn bma_predict(forecasts: &[BstsForecast], weights: &[f64]) -> Result<BstsForecast> {
    if forecasts.len() != weights.len() || forecasts.is_empty() {
        return Err(Error::arg(format!("{} forecasts for {} weights", forecasts.len(), weights.len())));
    }
    let h = forecasts[0].horizon();
    if forecasts.iter().any(|f| f.horizon() != h) {
        return Err(Error::arg("forecasts have different horizons"));
    }
    let total: usize = forecasts.iter().map(|f| f.weights.len()).sum();
    let mut means = DMatrix::zeros(h, total);
    let mut vars = DMatrix::zeros(h, total);
    let mut w = Vec::with_capacity(total);
    let mut col = 0;
    for (f, &mw) in forecasts.iter().zip(weights) {
        let k = f.weights.len();
        means.columns_mut(col, k).copy_from(&f.means);
        vars.columns_mut(col, k).copy_from(&f.vars);
        w.extend(f.weights.iter().map(|cw| cw * mw));
        col += k;
    }
    Ok(BstsForecast { weights: w, means, vars })
}
