//! Fitting the individual forecasters and rolling them over the test window.

use std::ops::Range;
use std::path::Path;

use ghicast_core::bsts::{self, BstsConfig, BstsModel};
use ghicast_core::dataset::{covariate_matrix, design_matrix, Covariate, Standardizer, TimeSeriesFrame};
use ghicast_core::dgp::{self, DgpModel};
use ghicast_core::gbr::{self, GbrModel};
use ghicast_core::gp::{self, GpModel};
use ghicast_core::quantile::{fit_aqr, AdditiveModel, AqrSpec, QuantileForecast};
use ghicast_core::{Error, Result};
use log::{info, warn};
use nalgebra::DMatrix;

use crate::config::{CovariateMode, ModelKind, PipelineConfig};

/// A fitted individual forecaster.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone)]
pub enum FittedModel {
    Gp { model: GpModel, standardizer: Standardizer },
    Dgp { model: DgpModel, standardizer: Standardizer },
    Bsts { model: BstsModel },
    Gbr { model: GbrModel, residual_sd: f64 },
    Aqr { model: AdditiveModel },
}

/// A model with its name and input features.
#[derive(Debug, Clone)]
pub struct Forecaster {
    pub kind: ModelKind,
    pub features: Vec<Covariate>,
    pub fitted: FittedModel,
}

/// Stitched forecasts over a window.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSeries {
    pub name: String,
    pub point: Vec<f64>,
    pub quantiles: Option<QuantileForecast>,
    /// Predictive standard deviation.
    pub sd: Option<Vec<f64>>,
}

impl ModelSeries {
    pub fn slice(&self, range: Range<usize>) -> Self {
        Self {
            name: self.name.clone(),
            point: self.point[range.clone()].to_vec(),
            quantiles: self.quantiles.as_ref().map(|q| q.slice(range.clone())),
            sd: self.sd.as_ref().map(|s| s[range].to_vec()),
        }
    }

    /// Quantile forecast, or the point forecast repeated at every level.
    pub fn quantiles_or_point(&self, levels: &[f64]) -> Result<QuantileForecast> {
        match &self.quantiles {
            Some(q) => Ok(q.clone()),
            None => {
                let values = DMatrix::from_fn(self.point.len(), levels.len(), |i, _| self.point[i]);
                QuantileForecast::with_point(levels.to_vec(), values, self.point.clone())
            }
        }
    }

    /// Column at level `tau`, or the point forecast at the median when there are no quantiles.
    pub fn at_level(&self, tau: f64) -> Option<Vec<f64>> {
        match &self.quantiles {
            Some(q) => Some(q.level_column(tau)),
            None if (tau - 0.5).abs() < 1e-12 => Some(self.point.clone()),
            None => None,
        }
    }
}

fn bsts_config(cfg: &PipelineConfig, kind: ModelKind) -> BstsConfig {
    let base = if kind == ModelKind::BstsShort { &cfg.model_settings.bsts_short } else { &cfg.model_settings.bsts_long };
    BstsConfig { seed: cfg.derived_seed(kind.name()), ..base.clone() }
}

fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt()
}

/// Fits one model on the training frame.
pub fn fit_model(kind: ModelKind, train: &TimeSeriesFrame, features: &[Covariate], cfg: &PipelineConfig) -> Result<Forecaster> {
    let ms = &cfg.model_settings;
    let seed = cfg.derived_seed(kind.name());
    info!("fitting {} on {} rows with {:?}", kind.name(), train.len(), features.iter().map(|f| f.name()).collect::<Vec<_>>());
    let fitted = match kind {
        ModelKind::Gpr => {
            let d = design_matrix(train, features, true)?;
            let gcfg = gp::GpConfig { seed, ..ms.gp.clone() };
            let model = gp::fit(&d.x, &d.y, &gp::default_init(&d.x, &d.y, gcfg.ard), &gcfg)?;
            FittedModel::Gp { model, standardizer: d.standardizer.expect("standardized design") }
        }
        ModelKind::Dgpr => {
            let d = design_matrix(train, features, true)?;
            let model = dgp::fit(&d.x, &d.y, &dgp::DgpConfig { seed, ..ms.dgp.clone() })?;
            FittedModel::Dgp { model, standardizer: d.standardizer.expect("standardized design") }
        }
        ModelKind::BstsLong | ModelKind::BstsShort => {
            let model = bsts::fit_frame(train, features, &bsts_config(cfg, kind))?;
            FittedModel::Bsts { model: model.thinned(ms.bsts_forecast_draws) }
        }
        ModelKind::Gbr => {
            let d = design_matrix(train, features, false)?;
            let model = gbr::fit(&d.x, d.y.as_slice(), &gbr::GbrConfig { seed, ..ms.gbr.clone() })?;
            let fitted = model.predict(&d.x)?;
            let resid: Vec<f64> = fitted.iter().zip(d.y.iter()).map(|(f, y)| y - f).collect();
            FittedModel::Gbr { model, residual_sd: sample_sd(&resid).max(1e-6) }
        }
        ModelKind::Aqr => {
            let d = design_matrix(train, features, false)?;
            // Columns with too few distinct values enter linearly.
            let smooth = (0..d.x.ncols())
                .map(|j| {
                    let mut u: Vec<f64> = d.x.column(j).iter().copied().collect();
                    u.sort_by(f64::total_cmp);
                    u.dedup();
                    u.len() >= 2 * ms.aqr.basis_dim
                })
                .collect();
            let spec = AqrSpec { smooth, basis_dim: ms.aqr.basis_dim, penalty: ms.aqr.penalty };
            FittedModel::Aqr { model: fit_aqr(&d.x, d.y.as_slice(), &spec, &cfg.levels)? }
        }
    };
    Ok(Forecaster { kind, features: features.to_vec(), fitted })
}

/// Writes the fitted model to `dir`.
pub fn save_model(f: &Forecaster, dir: &Path) -> Result<()> {
    let stem = f.kind.name();
    match &f.fitted {
        FittedModel::Gp { model, .. } => model.save_json(dir.join(format!("{stem}.json"))),
        FittedModel::Dgp { model, .. } => model.save_json(dir.join(format!("{stem}.json"))),
        FittedModel::Bsts { model } => model.save(dir, stem),
        FittedModel::Gbr { model, .. } => model.save_json(dir.join(format!("{stem}.json"))),
        FittedModel::Aqr { model } => {
            std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string(model)?)?;
            Ok(())
        }
    }
}

/// Consecutive forecast blocks of at most `horizon` rows covering `n` rows.
pub fn block_ranges(n: usize, horizon: usize) -> Vec<Range<usize>> {
    assert!(horizon > 0, "horizon must be positive");
    if n > 0 && n < horizon {
        warn!("test window of {n} hours is shorter than the {horizon}-hour horizon; forecasting one truncated block");
    }
    (0..n.div_ceil(horizon)).map(|b| b * horizon..((b + 1) * horizon).min(n)).collect()
}

/// Covariates for one block as available at its origin.
pub fn block_covariates(
    train: &TimeSeriesFrame,
    test: &TimeSeriesFrame,
    block: Range<usize>,
    mode: CovariateMode,
    features: &[Covariate],
) -> DMatrix<f64> {
    match mode {
        CovariateMode::Realized => covariate_matrix(&test.slice(block), features),
        CovariateMode::Persistence => {
            let hist_len = train.len() + block.start;
            let take = hist_len.min(24);
            let row = |i: usize| -> Vec<f64> {
                if i < train.len() {
                    features.iter().map(|f| train.covariates[f.index()][i]).collect()
                } else {
                    features.iter().map(|f| test.covariates[f.index()][i - train.len()]).collect()
                }
            };
            let hist: Vec<Vec<f64>> = (hist_len - take..hist_len).map(row).collect();
            DMatrix::from_fn(block.len(), features.len(), |i, j| hist[i % take][j])
        }
    }
}

fn stitched_covariates(f: &Forecaster, train: &TimeSeriesFrame, test: &TimeSeriesFrame, horizon: usize, mode: CovariateMode) -> DMatrix<f64> {
    let mut x = DMatrix::zeros(test.len(), f.features.len());
    for b in block_ranges(test.len(), horizon) {
        let xb = block_covariates(train, test, b.clone(), mode, &f.features);
        x.rows_mut(b.start, b.len()).copy_from(&xb);
    }
    x
}

fn finish(name: &str, mut q: QuantileForecast, sd: Option<Vec<f64>>) -> ModelSeries {
    q.clamp_min(0.0);
    q.rearrange();
    for p in &mut q.point {
        *p = p.max(0.0);
    }
    ModelSeries { name: name.to_string(), point: q.point.clone(), quantiles: Some(q), sd }
}

/// Rolling-origin forecast over the test window in `horizon`-hour blocks.
///
/// Each block sees the training set, the test rows before its origin, and
/// the block's covariates under `mode`.
pub fn rolling_forecast(
    f: &Forecaster,
    train: &TimeSeriesFrame,
    test: &TimeSeriesFrame,
    horizon: usize,
    mode: CovariateMode,
    levels: &[f64],
) -> Result<ModelSeries> {
    if test.is_empty() {
        return Err(Error::Argument("empty test window".into()));
    }
    let name = f.kind.name();
    match &f.fitted {
        FittedModel::Gp { model, standardizer } => {
            let x = standardizer.transform(&stitched_covariates(f, train, test, horizon, mode));
            let (mu, var) = model.predict(&x)?;
            let q = QuantileForecast::from_gaussian(mu.as_slice(), var.as_slice(), levels)?;
            Ok(finish(name, q, Some(var.iter().map(|v| v.max(0.0).sqrt()).collect())))
        }
        FittedModel::Dgp { model, standardizer } => {
            let x = standardizer.transform(&stitched_covariates(f, train, test, horizon, mode));
            let p = model.predict(&x)?;
            let q = QuantileForecast::from_gaussian(p.mean.as_slice(), p.var.as_slice(), levels)?;
            Ok(finish(name, q, Some(p.var.iter().map(|v| v.max(0.0).sqrt()).collect())))
        }
        FittedModel::Gbr { model, residual_sd } => {
            let x = stitched_covariates(f, train, test, horizon, mode);
            let point: Vec<f64> = model.predict(&x)?.into_iter().map(|v| v.max(0.0)).collect();
            Ok(ModelSeries { name: name.into(), point, quantiles: None, sd: Some(vec![*residual_sd; test.len()]) })
        }
        FittedModel::Aqr { model } => {
            let x = stitched_covariates(f, train, test, horizon, mode);
            let mut q = model.predict(&x)?;
            q.point = q.level_column(0.5);
            let sd = spread_sd(&q);
            Ok(finish(name, q, Some(sd)))
        }
        FittedModel::Bsts { model } => bsts_rolling(model, f, train, test, horizon, mode, levels),
    }
}

/// Standard deviation implied by the central 80% interval of a Gaussian.
pub fn spread_sd(q: &QuantileForecast) -> Vec<f64> {
    let lo = q.level_column(0.1);
    let hi = q.level_column(0.9);
    lo.iter().zip(&hi).map(|(a, b)| ((b - a) / (2.0 * 1.2815515655446004)).max(1e-6)).collect()
}

fn bsts_rolling(
    model: &BstsModel,
    f: &Forecaster,
    train: &TimeSeriesFrame,
    test: &TimeSeriesFrame,
    horizon: usize,
    mode: CovariateMode,
    levels: &[f64],
) -> Result<ModelSeries> {
    let std_x = |x: DMatrix<f64>| match &model.standardizer {
        Some(s) => s.transform(&x),
        None => x,
    };
    let n = test.len();
    let mut values = DMatrix::zeros(n, levels.len());
    let mut point = vec![0.0; n];
    let mut sd = vec![0.0; n];
    let mut beliefs = model.origin_beliefs();
    let mut prev: Option<Range<usize>> = None;
    for b in block_ranges(n, horizon) {
        if let Some(p) = prev.take() {
            // Observed history up to the origin.
            let obs = test.slice(p);
            let x_obs = std_x(covariate_matrix(&obs, &f.features));
            beliefs = model.assimilate(&beliefs, &obs.ghi, &x_obs)?;
        }
        let xb = std_x(block_covariates(train, test, b.clone(), mode, &f.features));
        let fc = model.forecast_from(&beliefs, &xb)?;
        let q = fc.quantiles(levels)?;
        let var = fc.variance();
        for (i, t) in b.clone().enumerate() {
            values.row_mut(t).copy_from(&q.values.row(i));
            point[t] = q.point[i];
            sd[t] = var[i].max(0.0).sqrt();
        }
        prev = Some(b);
    }
    let q = QuantileForecast::with_point(levels.to_vec(), values, point)?;
    Ok(finish(f.kind.name(), q, Some(sd)))
}
