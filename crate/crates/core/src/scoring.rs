//! Point metrics, proper scoring rules with Gamma predictive distributions,
//! pinball evaluation and Murphy diagrams.

use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, gamma_lr, gamma_ur, ln_gamma};

use crate::error::{Error, Result};
use crate::quantile::{pinball, QuantileForecast};

fn check_lengths(y: &[f64], yhat: &[f64]) -> Result<()> {
    if y.len() != yhat.len() {
        return Err(Error::arg(format!("length mismatch: {} actuals vs {} forecasts", y.len(), yhat.len())));
    }
    if y.is_empty() {
        return Err(Error::arg("empty series"));
    }
    Ok(())
}

/// Mean absolute error.
pub fn mae(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_lengths(y, yhat)?;
    let mut s = 0.0;
    for (a, b) in y.iter().zip(yhat) {
        s += (a - b).abs();
    }
    Ok(s / y.len() as f64)
}

/// Root mean squared error.
pub fn rmse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_lengths(y, yhat)?;
    let s: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((s / y.len() as f64).sqrt())
}

/// Trigamma function ψ'(x) for x > 0.
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 12.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let x2 = 1.0 / (x * x);
    acc + 1.0 / x + x2 / 2.0 + (1.0 / x) * x2 * (1.0 / 6.0 - x2 * (1.0 / 30.0 - x2 * (1.0 / 42.0 - x2 / 30.0)))
}

/// Gamma(shape k, scale θ) fitted to data shifted by `shift`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaFit {
    pub shape: f64,
    pub scale: f64,
    /// Added to values before fitting and to observations before scoring.
    pub shift: f64,
}

impl GammaFit {
    pub fn new(shape: f64, scale: f64, shift: f64) -> Result<Self> {
        if !(shape > 0.0 && scale > 0.0 && shift >= 0.0) || !shape.is_finite() || !scale.is_finite() {
            return Err(Error::arg(format!("invalid gamma parameters k={shape}, θ={scale}, ε={shift}")));
        }
        Ok(Self { shape, scale, shift })
    }

    pub fn mean(&self) -> f64 {
        self.shape * self.scale
    }

    pub fn sd(&self) -> f64 {
        self.shape.sqrt() * self.scale
    }

    /// CDF in the shifted coordinate.
    pub fn cdf(&self, z: f64) -> f64 {
        if z <= 0.0 {
            0.0
        } else {
            gamma_lr(self.shape, z / self.scale)
        }
    }

    fn sf(&self, z: f64) -> f64 {
        if z <= 0.0 {
            1.0
        } else {
            gamma_ur(self.shape, z / self.scale)
        }
    }

    /// Log density in the shifted coordinate; `-inf` outside the open support.
    pub fn ln_pdf(&self, z: f64) -> f64 {
        if z <= 0.0 || !z.is_finite() {
            return f64::NEG_INFINITY;
        }
        (self.shape - 1.0) * z.ln() - z / self.scale - ln_gamma(self.shape) - self.shape * self.scale.ln()
    }

    pub fn log_likelihood(&self, shifted: &[f64]) -> f64 {
        shifted.iter().map(|&z| self.ln_pdf(z)).sum()
    }
}

/// Maximum-likelihood Gamma fit to `samples + shift`.
///
/// Newton iteration on `ln k - ψ(k) = ln(mean) - mean(ln x)` starting from the
/// moment estimator. Non-positive shifted values are rejected.
pub fn fit_gamma(samples: &[f64], shift: f64) -> Result<GammaFit> {
    if samples.len() < 10 {
        return Err(Error::DataQuality(format!("gamma fit needs at least 10 samples, got {}", samples.len())));
    }
    let z: Vec<f64> = samples.iter().map(|v| v + shift).collect();
    if z.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::DataQuality("gamma fit requires strictly positive shifted samples".into()));
    }
    let n = z.len() as f64;
    let mean = z.iter().sum::<f64>() / n;
    let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    if !(var > 1e-14 * mean * mean) {
        return Err(Error::DataQuality("gamma fit on zero-variance data".into()));
    }
    let k0 = mean * mean / var;
    let init = GammaFit { shape: k0, scale: var / mean, shift };
    let s = mean.ln() - z.iter().map(|v| v.ln()).sum::<f64>() / n;

    let mut k = k0;
    for _ in 0..100 {
        let f = k.ln() - digamma(k) - s;
        let fp = 1.0 / k - trigamma(k);
        let mut next = k - f / fp;
        if !(next > 0.0) {
            next = k / 2.0;
        }
        let done = (next - k).abs() <= 1e-12 * k;
        k = next;
        if done {
            break;
        }
    }
    let fitted = GammaFit { shape: k, scale: mean / k, shift };
    if fitted.log_likelihood(&z) >= init.log_likelihood(&z) {
        Ok(fitted)
    } else {
        Ok(init)
    }
}

const GK_NODES: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const GK_WK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_728_0,
];
const GK_WG: [f64; 4] = [0.129_484_966_168_869_7, 0.279_705_391_489_276_7, 0.381_830_050_505_118_9, 0.417_959_183_673_469_4];

fn gauss_kronrod<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = GK_WK[7] * fc;
    let mut g = GK_WG[3] * fc;
    for i in 0..7 {
        let x = h * GK_NODES[i];
        let s = f(c - x) + f(c + x);
        k += GK_WK[i] * s;
        if i % 2 == 1 {
            g += GK_WG[i / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

/// Adaptive Gauss–Kronrod (7/15) quadrature to absolute tolerance `tol`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> Result<f64> {
    if b <= a {
        return Ok(0.0);
    }
    let mut stack = vec![(a, b, tol)];
    let mut total = 0.0;
    let mut evals = 0usize;
    while let Some((lo, hi, t)) = stack.pop() {
        let (v, err) = gauss_kronrod(&f, lo, hi);
        evals += 1;
        if err <= t || hi - lo < 1e-12 * (1.0 + lo.abs()) {
            total += v;
        } else if evals > 20_000 {
            return Err(Error::numerical("quadrature did not converge"));
        } else {
            let mid = 0.5 * (lo + hi);
            stack.push((lo, mid, t / 2.0));
            stack.push((mid, hi, t / 2.0));
        }
    }
    if !total.is_finite() {
        return Err(Error::numerical("quadrature produced a non-finite value"));
    }
    Ok(total)
}

/// CRPS of a Gamma predictive distribution by adaptive quadrature of
/// `∫ (F(z) - 1{z ≥ y})² dz` (absolute tolerance 1e-6).
pub fn crps(f: &GammaFit, y: f64) -> Result<f64> {
    if !y.is_finite() {
        return Err(Error::arg("CRPS of a non-finite observation"));
    }
    let y = y + f.shift;
    let (mean, sd) = (f.mean(), f.sd());
    // E[(X - U)+] bounds the neglected upper tail.
    let tail = |u: f64| f.mean() * gamma_ur(f.shape + 1.0, u / f.scale) - u * f.sf(u);
    let mut upper = (mean + 40.0 * sd).max(y.max(0.0) + sd);
    while tail(upper) > 1e-10 {
        upper *= 2.0;
    }
    let mut cuts: Vec<f64> = vec![0.0, upper];
    for c in [-8.0, -3.0, -1.0, 0.0, 1.0, 3.0, 8.0] {
        cuts.push(mean + c * sd);
    }
    if y > 0.0 {
        cuts.push(y);
    }
    cuts.retain(|c| *c >= 0.0 && *c <= upper);
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup();

    let mut total = 0.0;
    let pieces = (cuts.len() - 1) as f64;
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let v = if b <= y {
            integrate(|z| f.cdf(z).powi(2), a, b, 1e-6 / pieces)?
        } else if a >= y {
            integrate(|z| f.sf(z).powi(2), a, b, 1e-6 / pieces)?
        } else {
            unreachable!("y is a cut point")
        };
        total += v;
    }
    // Below the support F = 0, so only an observation below zero contributes there.
    if y < 0.0 {
        total += -y;
    }
    Ok(total)
}

/// Closed-form CRPS for a Gamma distribution.
pub fn crps_closed_form(f: &GammaFit, y: f64) -> f64 {
    let y = y + f.shift;
    let (k, th) = (f.shape, f.scale);
    if y <= 0.0 {
        return f.mean() - y - th / beta_half(k);
    }
    y * (2.0 * gamma_lr(k, y / th) - 1.0) - k * th * (2.0 * gamma_lr(k + 1.0, y / th) - 1.0) - th / beta_half(k)
}

fn beta_half(k: f64) -> f64 {
    (ln_gamma(0.5) + ln_gamma(k) - ln_gamma(k + 0.5)).exp()
}

/// Logarithmic score `-ln f(y)`; `+inf` where the density vanishes.
pub fn logs(f: &GammaFit, y: f64) -> f64 {
    -f.ln_pdf(y + f.shift)
}

/// Dawid–Sebastiani score `((y - μ)/σ)² + 2 ln σ`.
pub fn dss(mean: f64, sd: f64, y: f64) -> Result<f64> {
    if !(sd > 0.0) {
        return Err(Error::arg(format!("DSS needs a positive standard deviation, got {sd}")));
    }
    let z = (y - mean) / sd;
    Ok(z * z + 2.0 * sd.ln())
}

/// Mean pinball loss over all times and levels.
pub fn pl(forecast: &QuantileForecast, y: &[f64]) -> Result<f64> {
    if forecast.len() != y.len() {
        return Err(Error::arg(format!("{} forecast rows vs {} actuals", forecast.len(), y.len())));
    }
    if y.is_empty() {
        return Err(Error::arg("empty series"));
    }
    let mut s = 0.0;
    for (t, &obs) in y.iter().enumerate() {
        for (l, &tau) in forecast.levels.iter().enumerate() {
            s += pinball(obs, forecast.values[(t, l)], tau)?;
        }
    }
    Ok(s / (y.len() * forecast.levels.len()) as f64)
}

/// Extremal (elementary) quantile score `(1{y<q} - τ)(1{θ<q} - 1{θ<y})`.
pub fn elementary_score(q: f64, y: f64, theta: f64, tau: f64) -> f64 {
    let ind = |b: bool| if b { 1.0 } else { 0.0 };
    (ind(y < q) - tau) * (ind(theta < q) - ind(theta < y))
}

/// Mean elementary scores over a threshold grid, one curve per model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MurphyCurve {
    pub tau: f64,
    pub thetas: Vec<f64>,
    pub models: Vec<String>,
    /// `mean_scores[m][i]` for model m at `thetas[i]`.
    pub mean_scores: Vec<Vec<f64>>,
}

impl MurphyCurve {
    /// Pointwise `a - b` between two models' curves.
    pub fn difference(&self, a: &str, b: &str) -> Result<Vec<f64>> {
        let idx = |name: &str| {
            self.models
                .iter()
                .position(|m| m == name)
                .ok_or_else(|| Error::arg(format!("model '{name}' not in Murphy curve")))
        };
        let (ia, ib) = (idx(a)?, idx(b)?);
        Ok(self.mean_scores[ia].iter().zip(&self.mean_scores[ib]).map(|(x, y)| x - y).collect())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        let mut header = vec!["theta".to_string()];
        header.extend(self.models.iter().cloned());
        w.write_record(&header)?;
        for (i, th) in self.thetas.iter().enumerate() {
            let mut rec = vec![format!("{th}")];
            rec.extend(self.mean_scores.iter().map(|c| format!("{}", c[i])));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Murphy diagram data for point (quantile-τ) forecasts of several models.
///
/// The grid spans `[min, max]` of the observations and all forecasts with
/// `grid_size` equally spaced thresholds.
pub fn murphy(forecasts: &[(String, Vec<f64>)], y: &[f64], tau: f64, grid_size: usize) -> Result<MurphyCurve> {
    if y.is_empty() || forecasts.is_empty() {
        return Err(Error::arg("Murphy diagram of an empty series"));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::arg(format!("quantile level {tau} outside (0,1)")));
    }
    if grid_size < 2 {
        return Err(Error::arg("Murphy grid needs at least 2 points"));
    }
    for (name, f) in forecasts {
        if f.len() != y.len() {
            return Err(Error::arg(format!("model '{name}' has {} forecasts for {} actuals", f.len(), y.len())));
        }
    }
    let all = y.iter().chain(forecasts.iter().flat_map(|(_, f)| f.iter()));
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let thetas: Vec<f64> = (0..grid_size)
        .map(|i| if i + 1 == grid_size { hi } else { lo + (hi - lo) * i as f64 / (grid_size - 1) as f64 })
        .collect();
    let n = y.len() as f64;
    let mean_scores = forecasts
        .iter()
        .map(|(_, f)| {
            thetas
                .iter()
                .map(|&th| f.iter().zip(y).map(|(&q, &obs)| elementary_score(q, obs, th, tau)).sum::<f64>() / n)
                .collect()
        })
        .collect();
    Ok(MurphyCurve { tau, thetas, models: forecasts.iter().map(|(n, _)| n.clone()).collect(), mean_scores })
}

/// How the predictive distribution for CRPS/LogS/DSS is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GammaMode {
    /// One Gamma fitted to the model's forecast values over the window.
    #[default]
    FittedToForecasts,
    /// Per-time Gamma moment-matched to the point forecast and predictive spread.
    PerPoint,
}

/// Scoring options.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoringOptions {
    pub gamma_mode: GammaMode,
    /// Shift ε (W/m²) added before Gamma fitting and scoring.
    pub shift: f64,
}

impl Default for ScoringOptions {
    fn default() -> Self {
        Self { gamma_mode: GammaMode::FittedToForecasts, shift: 0.01 }
    }
}

/// One model's forecasts over the scoring window.
#[derive(Debug, Clone)]
pub struct ModelForecast<'a> {
    pub name: &'a str,
    pub point: &'a [f64],
    pub quantiles: Option<&'a QuantileForecast>,
    /// Predictive standard deviation per time, used by [`GammaMode::PerPoint`].
    pub sd: Option<&'a [f64]>,
}

/// One row of a [`ScoreReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub model: String,
    pub rmse: f64,
    pub mae: f64,
    pub crps: f64,
    /// LogS with the ε-shift applied.
    pub logs: f64,
    pub dss: f64,
    pub pl: f64,
    /// LogS with no shift; `inf` when any observation has zero density.
    pub logs_unshifted: f64,
    /// Observations with zero density under the unshifted protocol.
    pub zero_density: usize,
    pub n: usize,
}

/// Per-model score table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub window: String,
    pub night_policy: String,
    pub rows: Vec<ScoreRow>,
}

fn fmt_score(v: f64) -> String {
    if v == f64::INFINITY {
        "Inf".into()
    } else if v == f64::NEG_INFINITY {
        "-Inf".into()
    } else if v.is_nan() {
        "NA".into()
    } else {
        format!("{v}")
    }
}

impl ScoreReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["Model", "RMSE", "MAE", "CRPS", "LogS", "DSS", "PL", "LogS_unshifted", "ZeroDensity", "N"])?;
        for r in &self.rows {
            w.write_record([
                r.model.clone(),
                fmt_score(r.rmse),
                fmt_score(r.mae),
                fmt_score(r.crps),
                fmt_score(r.logs),
                fmt_score(r.dss),
                fmt_score(r.pl),
                fmt_score(r.logs_unshifted),
                r.zero_density.to_string(),
                r.n.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn row(&self, model: &str) -> Option<&ScoreRow> {
        self.rows.iter().find(|r| r.model == model)
    }
}

fn mean_of(v: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    s / n as f64
}

/// Scores one model against actuals.
pub fn score_model(m: &ModelForecast<'_>, y: &[f64], opts: &ScoringOptions) -> Result<ScoreRow> {
    check_lengths(y, m.point)?;
    let mae_v = mae(y, m.point)?;
    let rmse_v = rmse(y, m.point)?;
    let pl_v = match m.quantiles {
        Some(q) => pl(q, y)?,
        None => f64::NAN,
    };
    // Forecast values are clamped to the physical range before Gamma fitting.
    let clamped: Vec<f64> = m.point.iter().map(|v| v.max(0.0)).collect();

    let (crps_v, logs_v, dss_v, logs_un, zero) = match opts.gamma_mode {
        GammaMode::FittedToForecasts => {
            let g = fit_gamma(&clamped, opts.shift)?;
            let crps_v = mean_of(y.iter().map(|&o| crps(&g, o)).collect::<Result<Vec<_>>>()?.into_iter());
            let logs_v = mean_of(y.iter().map(|&o| logs(&g, o)));
            let dss_v = mean_of(y.iter().map(|&o| dss(g.mean(), g.sd(), o + g.shift)).collect::<Result<Vec<_>>>()?.into_iter());
            let positive: Vec<f64> = clamped.iter().copied().filter(|v| *v > 0.0).collect();
            let (logs_un, zero) = match fit_gamma(&positive, 0.0) {
                Ok(g0) => {
                    let zero = y.iter().filter(|&&o| g0.ln_pdf(o) == f64::NEG_INFINITY).count();
                    (mean_of(y.iter().map(|&o| logs(&g0, o))), zero)
                }
                Err(_) => (f64::NAN, 0),
            };
            (crps_v, logs_v, dss_v, logs_un, zero)
        }
        GammaMode::PerPoint => {
            let sd = m.sd.ok_or_else(|| Error::arg(format!("model '{}' has no predictive spread", m.name)))?;
            check_lengths(y, sd)?;
            let (mut c, mut l, mut d, mut l0, mut zero) = (0.0, 0.0, 0.0, 0.0, 0usize);
            for t in 0..y.len() {
                let mu = clamped[t] + opts.shift;
                let s = sd[t].max(1e-6);
                let g = GammaFit::new(mu * mu / (s * s), s * s / mu, opts.shift)?;
                c += crps(&g, y[t])?;
                l += logs(&g, y[t]);
                d += dss(g.mean(), g.sd(), y[t] + opts.shift)?;
                let g0 = GammaFit { shift: 0.0, ..g };
                let s0 = logs(&g0, y[t]);
                if s0 == f64::INFINITY {
                    zero += 1;
                }
                l0 += s0;
            }
            let n = y.len() as f64;
            (c / n, l / n, d / n, l0 / n, zero)
        }
    };
    Ok(ScoreRow {
        model: m.name.to_string(),
        rmse: rmse_v,
        mae: mae_v,
        crps: crps_v,
        logs: logs_v,
        dss: dss_v,
        pl: pl_v,
        logs_unshifted: logs_un,
        zero_density: zero,
        n: y.len(),
    })
}
