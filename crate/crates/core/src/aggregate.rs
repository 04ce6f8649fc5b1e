//! Online convex aggregation of expert forecasts by exponentially weighted
//! averaging, optionally with fixed share.

use std::io::Write;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantile::{check_loss, QuantileForecast};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Loss {
    Square,
    Pinball(f64),
}

impl Loss {
    pub fn eval(self, pred: f64, actual: f64) -> f64 {
        match self {
            Loss::Square => (pred - actual).powi(2),
            Loss::Pinball(tau) => check_loss(actual - pred, tau),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LearningRate {
    Fixed(f64),
    /// `η_t = sqrt(8 ln K / t) / B_t` with `B_t` the largest per-round loss
    /// range seen so far.
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertMixture {
    pub experts: Vec<String>,
    pub weights: Vec<f64>,
    pub loss: Loss,
    pub learning_rate: LearningRate,
    /// Mixing toward uniform after each update.
    pub fixed_share: Option<f64>,
    /// Completed updates.
    pub rounds: usize,
    pub loss_range: f64,
}

impl ExpertMixture {
    pub fn new(experts: Vec<String>, prior: Option<Vec<f64>>, loss: Loss, learning_rate: LearningRate) -> Result<Self> {
        let k = experts.len();
        if k == 0 {
            return Err(Error::arg("at least one expert is required"));
        }
        let weights = match prior {
            Some(p) => {
                if p.len() != k {
                    return Err(Error::arg(format!("{} prior weights for {k} experts", p.len())));
                }
                if p.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
                    return Err(Error::arg("prior weights must be finite and non-negative"));
                }
                let s: f64 = p.iter().sum();
                if (s - 1.0).abs() > 1e-9 {
                    return Err(Error::arg(format!("prior weights sum to {s}, not 1")));
                }
                p
            }
            None => vec![1.0 / k as f64; k],
        };
        match learning_rate {
            LearningRate::Fixed(eta) if !(eta >= 0.0) || !eta.is_finite() => {
                return Err(Error::arg(format!("learning rate {eta} must be finite and non-negative")));
            }
            _ => {}
        }
        if let Loss::Pinball(tau) = loss {
            if !(tau > 0.0 && tau < 1.0) {
                return Err(Error::arg(format!("pinball level {tau} outside (0,1)")));
            }
        }
        Ok(Self { experts, weights, loss, learning_rate, fixed_share: None, rounds: 0, loss_range: 0.0 })
    }

    pub fn with_fixed_share(mut self, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::arg(format!("fixed-share rate {alpha} outside [0,1]")));
        }
        self.fixed_share = Some(alpha);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    fn check(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::arg(format!("{} expert values for {} experts", values.len(), self.len())));
        }
        Ok(())
    }

    /// Convex combination of the expert values under the current weights.
    pub fn predict(&self, values: &[f64]) -> Result<f64> {
        self.check(values)?;
        let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        let p: f64 = self.weights.iter().zip(values).map(|(w, v)| w * v).sum();
        Ok(p.clamp(lo, hi))
    }

    fn eta(&self) -> f64 {
        match self.learning_rate {
            LearningRate::Fixed(e) => e,
            LearningRate::Auto => {
                if self.loss_range > 0.0 {
                    (8.0 * (self.len() as f64).ln() / (self.rounds + 1) as f64).sqrt() / self.loss_range
                } else {
                    0.0
                }
            }
        }
    }

    /// Exponential-weights update after observing `actual`.
    pub fn update(&mut self, values: &[f64], actual: f64) -> Result<()> {
        self.check(values)?;
        let losses: Vec<f64> = values.iter().map(|&v| self.loss.eval(v, actual)).collect();
        if losses.iter().any(|l| !l.is_finite()) {
            warn!("non-finite loss at round {}; update skipped", self.rounds + 1);
            return Ok(());
        }
        let (lo, hi) = losses.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        self.loss_range = self.loss_range.max(hi - lo);
        let eta = self.eta();
        // Losses are shifted by their minimum; the shift cancels on normalization.
        let logw: Vec<f64> = self.weights.iter().zip(&losses).map(|(w, l)| w.ln() - eta * (l - lo)).collect();
        let m = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let raw: Vec<f64> = logw.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = raw.iter().sum();
        let k = self.len() as f64;
        self.weights = raw.iter().map(|r| r / s).collect();
        if let Some(a) = self.fixed_share {
            for w in &mut self.weights {
                *w = (1.0 - a) * *w + a / k;
            }
        }
        self.rounds += 1;
        Ok(())
    }
}

/// Predictions and the weights used for each of them.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationRun {
    pub predictions: Vec<f64>,
    pub weights: Vec<Vec<f64>>,
}

/// Predict-then-update over a stream. `experts[t][k]` is expert k at time t.
/// Rows with a missing (non-finite) actual are predicted but not learned from.
pub fn run_stream(mix: &mut ExpertMixture, experts: &[Vec<f64>], actuals: &[f64]) -> Result<AggregationRun> {
    if experts.len() != actuals.len() {
        return Err(Error::arg(format!("{} expert rows but {} actuals", experts.len(), actuals.len())));
    }
    let mut predictions = Vec::with_capacity(actuals.len());
    let mut weights = Vec::with_capacity(actuals.len());
    for (row, &y) in experts.iter().zip(actuals) {
        predictions.push(mix.predict(row)?);
        weights.push(mix.weights.clone());
        if y.is_finite() {
            mix.update(row, y)?;
        }
    }
    Ok(AggregationRun { predictions, weights })
}

/// Per-level pinball aggregation of quantile forecasts, rearranged.
/// `actuals` may contain NaN where the outcome is not yet known.
pub fn aggregate_quantiles(
    names: &[String],
    forecasts: &[&QuantileForecast],
    actuals: &[f64],
    learning_rate: LearningRate,
    fixed_share: Option<f64>,
) -> Result<(QuantileForecast, Vec<AggregationRun>)> {
    let Some(first) = forecasts.first() else {
        return Err(Error::arg("at least one expert forecast is required"));
    };
    if names.len() != forecasts.len() {
        return Err(Error::arg("expert names and forecasts differ in length"));
    }
    let levels = first.levels.clone();
    let t = first.len();
    for f in forecasts {
        if f.levels != levels || f.len() != t {
            return Err(Error::arg("expert forecasts must share levels and length"));
        }
    }
    if actuals.len() != t {
        return Err(Error::arg(format!("{t} forecast rows but {} actuals", actuals.len())));
    }
    let mut values = nalgebra::DMatrix::zeros(t, levels.len());
    let mut runs = Vec::with_capacity(levels.len());
    for (l, &tau) in levels.iter().enumerate() {
        let mut mix = ExpertMixture::new(names.to_vec(), None, Loss::Pinball(tau), learning_rate)?;
        if let Some(a) = fixed_share {
            mix = mix.with_fixed_share(a)?;
        }
        let rows: Vec<Vec<f64>> = (0..t).map(|i| forecasts.iter().map(|f| f.values[(i, l)]).collect()).collect();
        let run = run_stream(&mut mix, &rows, actuals)?;
        for (i, p) in run.predictions.iter().enumerate() {
            values[(i, l)] = *p;
        }
        runs.push(run);
    }
    Ok((QuantileForecast::new(levels, values)?, runs))
}

/// Weight trajectory with a `t` column and one column per expert.
pub fn write_weights_csv<W: Write>(experts: &[String], weights: &[Vec<f64>], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["t".to_string()];
    header.extend(experts.iter().cloned());
    wr.write_record(&header)?;
    for (t, row) in weights.iter().enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend(row.iter().map(|v| format!("{v}")));
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}
