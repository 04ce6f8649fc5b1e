//! Variable selection: lasso, elastic net and boosted-tree importance, each
//! scored by a median linear quantile regression on the chosen features.

use std::io::Write;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{covariate_matrix, Covariate, DatasetSplit, Standardizer, TimeSeriesFrame};
use crate::error::{Error, Result};
use crate::gbr::{self, GbrConfig};
use crate::quantile::fit_lqr;
use crate::scoring::mae;

pub const CD_TOLERANCE: f64 = 1e-7;
pub const MAX_SWEEPS: usize = 100_000;

pub fn soft_threshold(z: f64, g: f64) -> f64 {
    if z > g {
        z - g
    } else if z < -g {
        z + g
    } else {
        0.0
    }
}

/// `½N⁻¹‖y − Xβ‖² + λ(α‖β‖₁ + ½(1−α)‖β‖²)`.
pub fn objective(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>, lambda: f64, alpha: f64) -> f64 {
    let n = x.nrows() as f64;
    let r = y - x * beta;
    0.5 * r.norm_squared() / n + lambda * (alpha * beta.lp_norm(1) + 0.5 * (1.0 - alpha) * beta.norm_squared())
}

/// Cyclic coordinate descent from `warm`; stops when no coefficient moves
/// by more than [`CD_TOLERANCE`] in a sweep.
pub fn elastic_net_warm(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    lambda: f64,
    alpha: f64,
    warm: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    let (n, d) = x.shape();
    if y.len() != n || n == 0 {
        return Err(Error::arg(format!("{n} rows but {} targets", y.len())));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::arg(format!("penalty {lambda} must be finite and non-negative")));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::arg(format!("mixing parameter {alpha} outside [0,1]")));
    }
    let col_sq: Vec<f64> = (0..d).map(|j| x.column(j).norm_squared() / n as f64).collect();
    let mut beta = match warm {
        Some(w) if w.len() == d => w.clone(),
        _ => DVector::zeros(d),
    };
    let mut r = y - x * &beta;
    for _ in 0..MAX_SWEEPS {
        if sweep_inner(x, &col_sq, &mut r, &mut beta, lambda, alpha) < CD_TOLERANCE {
            return Ok(beta);
        }
    }
    Err(Error::Numerical(format!(
        "coordinate descent did not converge in {MAX_SWEEPS} sweeps (lambda {lambda}, alpha {alpha}, residual norm {:.3e}, objective {:.6e})",
        r.norm(),
        objective(x, y, &beta, lambda, alpha)
    )))
}

fn sweep_inner(x: &DMatrix<f64>, col_sq: &[f64], r: &mut DVector<f64>, beta: &mut DVector<f64>, lambda: f64, alpha: f64) -> f64 {
    let nf = x.nrows() as f64;
    let (l1, l2) = (lambda * alpha, lambda * (1.0 - alpha));
    let mut max_change: f64 = 0.0;
    for j in 0..x.ncols() {
        if col_sq[j] == 0.0 {
            beta[j] = 0.0;
            continue;
        }
        let old = beta[j];
        let rho = x.column(j).dot(r) / nf + col_sq[j] * old;
        let new = soft_threshold(rho, l1) / (col_sq[j] + l2);
        if new != old {
            r.axpy(old - new, &x.column(j), 1.0);
            beta[j] = new;
            max_change = max_change.max((new - old).abs() * col_sq[j].sqrt());
        }
    }
    max_change
}

/// One full coordinate-descent sweep over `beta`; returns the largest
/// scaled coefficient change.
pub fn sweep(x: &DMatrix<f64>, y: &DVector<f64>, beta: &mut DVector<f64>, lambda: f64, alpha: f64) -> f64 {
    let nf = x.nrows() as f64;
    let col_sq: Vec<f64> = (0..x.ncols()).map(|j| x.column(j).norm_squared() / nf).collect();
    let mut r = y - x * &*beta;
    sweep_inner(x, &col_sq, &mut r, beta, lambda, alpha)
}

pub fn elastic_net(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64, alpha: f64) -> Result<DVector<f64>> {
    elastic_net_warm(x, y, lambda, alpha, None)
}

pub fn lasso(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    elastic_net(x, y, lambda, 1.0)
}

/// Smallest penalty with an all-zero solution; the mixing parameter is
/// floored at 1e-3 so the ridge end stays finite.
pub fn lambda_max(x: &DMatrix<f64>, y: &DVector<f64>, alpha: f64) -> f64 {
    let n = x.nrows() as f64;
    let m = (0..x.ncols()).map(|j| (x.column(j).dot(y) / n).abs()).fold(0.0, f64::max);
    m / alpha.max(1e-3)
}

/// Log-spaced grid from `lmax` down to `ratio·lmax`.
pub fn lambda_grid(lmax: f64, count: usize, ratio: f64) -> Vec<f64> {
    if count <= 1 {
        return vec![lmax];
    }
    (0..count).map(|k| lmax * ratio.powf(k as f64 / (count - 1) as f64)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionMethod {
    Lasso,
    ElasticNet,
    Gbr,
}

impl SelectionMethod {
    pub const ALL: [SelectionMethod; 3] = [SelectionMethod::Lasso, SelectionMethod::ElasticNet, SelectionMethod::Gbr];

    pub fn name(self) -> &'static str {
        match self {
            SelectionMethod::Lasso => "Lasso",
            SelectionMethod::ElasticNet => "ElasticNet",
            SelectionMethod::Gbr => "GBR",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::arg(format!("unknown selection method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub candidates: Vec<Covariate>,
    pub alpha_mix: f64,
    pub folds: usize,
    pub n_lambda: usize,
    pub lambda_ratio: f64,
    pub gbr: GbrConfig,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            candidates: Covariate::ALL.to_vec(),
            alpha_mix: 0.5,
            folds: 5,
            n_lambda: 100,
            lambda_ratio: 1e-4,
            gbr: GbrConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub method: String,
    pub selected: Vec<String>,
    /// Coefficient (penalized methods) or importance (GBR) per candidate.
    pub scores: Vec<(String, f64)>,
    pub lambda: Option<f64>,
    /// Median-regression test MAE in W/m².
    pub mae: Option<f64>,
}

/// Mean validation MSE per grid point under contiguous K-fold splits.
pub fn cv_errors(x: &DMatrix<f64>, y: &DVector<f64>, grid: &[f64], alpha: f64, folds: usize) -> Result<Vec<f64>> {
    let n = x.nrows();
    if folds < 2 || n < 2 * folds {
        return Err(Error::arg(format!("{folds}-fold validation needs at least {} rows", 2 * folds.max(2))));
    }
    let per_fold: Vec<Result<Vec<f64>>> = (0..folds)
        .into_par_iter()
        .map(|k| {
            let (lo, hi) = (k * n / folds, (k + 1) * n / folds);
            let train: Vec<usize> = (0..lo).chain(hi..n).collect();
            let xt = DMatrix::from_fn(train.len(), x.ncols(), |i, j| x[(train[i], j)]);
            let yt = DVector::from_fn(train.len(), |i, _| y[train[i]]);
            let s = Standardizer::fit(&xt);
            let xs = s.transform(&xt);
            let ym = yt.mean();
            let yc = yt.map(|v| v - ym);
            let xv = s.transform(&x.rows(lo, hi - lo).into_owned());
            let yv = y.rows(lo, hi - lo);
            let mut beta = DVector::zeros(x.ncols());
            let mut errs = Vec::with_capacity(grid.len());
            for &lam in grid {
                beta = elastic_net_warm(&xs, &yc, lam, alpha, Some(&beta))?;
                let pred = &xv * &beta;
                errs.push(pred.iter().zip(yv.iter()).map(|(p, t)| (p + ym - t).powi(2)).sum::<f64>() / (hi - lo) as f64);
            }
            Ok(errs)
        })
        .collect();
    let mut total = vec![0.0; grid.len()];
    for f in per_fold {
        for (t, e) in total.iter_mut().zip(f?) {
            *t += e / folds as f64;
        }
    }
    Ok(total)
}

fn top_by_abs(scores: &[f64]) -> usize {
    let mut best = 0;
    for (j, s) in scores.iter().enumerate() {
        if s.abs() > scores[best].abs() {
            best = j;
        }
    }
    best
}

/// Selects features on a (training) frame. The MAE field is left empty.
pub fn select(method: SelectionMethod, frame: &TimeSeriesFrame, cfg: &SelectionConfig) -> Result<SelectionResult> {
    let cands = &cfg.candidates;
    if cands.is_empty() {
        return Err(Error::arg("no candidate features"));
    }
    let raw = covariate_matrix(frame, cands);
    let y = DVector::from_column_slice(&frame.ghi);
    let names: Vec<String> = cands.iter().map(|c| c.name().to_string()).collect();
    let d = cands.len();

    let (scores, chosen, lambda): (Vec<f64>, Vec<usize>, Option<f64>) = match method {
        SelectionMethod::Lasso | SelectionMethod::ElasticNet => {
            let alpha = if method == SelectionMethod::Lasso { 1.0 } else { cfg.alpha_mix };
            let s = Standardizer::fit(&raw);
            let xs = s.transform(&raw);
            let ym = y.mean();
            let yc = y.map(|v| v - ym);
            let grid = lambda_grid(lambda_max(&xs, &yc, alpha), cfg.n_lambda, cfg.lambda_ratio);
            let errs = cv_errors(&raw, &y, &grid, alpha, cfg.folds)?;
            let mut k = 0;
            for (i, e) in errs.iter().enumerate() {
                if *e < errs[k] {
                    k = i;
                }
            }
            let mut beta = DVector::zeros(d);
            for &lam in &grid[..=k] {
                beta = elastic_net_warm(&xs, &yc, lam, alpha, Some(&beta))?;
            }
            let sc: Vec<f64> = beta.iter().copied().collect();
            let chosen = (0..d).filter(|&j| sc[j] != 0.0).collect();
            (sc, chosen, Some(grid[k]))
        }
        SelectionMethod::Gbr => {
            let m = gbr::fit(&raw, &frame.ghi, &cfg.gbr)?;
            let imp = m.importance();
            let cut = 1.0 / (2.0 * d as f64);
            let chosen = (0..d).filter(|&j| imp[j] > cut).collect();
            (imp, chosen, None)
        }
    };
    let chosen = if chosen.is_empty() {
        let j = if scores.iter().all(|s| *s == 0.0) {
            // Fall back on marginal association.
            let n = raw.nrows() as f64;
            let ym = y.mean();
            let corr: Vec<f64> = (0..d)
                .map(|j| {
                    let c = raw.column(j);
                    let cm = c.sum() / n;
                    let sd = (c.iter().map(|v| (v - cm).powi(2)).sum::<f64>()).sqrt();
                    if sd == 0.0 {
                        0.0
                    } else {
                        c.iter().zip(y.iter()).map(|(a, b)| (a - cm) * (b - ym)).sum::<f64>() / sd
                    }
                })
                .collect();
            top_by_abs(&corr)
        } else {
            top_by_abs(&scores)
        };
        warn!("{} selected no features; keeping top feature {}", method.name(), names[j]);
        vec![j]
    } else {
        chosen
    };
    info!("{} selected {:?}", method.name(), chosen.iter().map(|&j| &names[j]).collect::<Vec<_>>());
    Ok(SelectionResult {
        method: method.name().to_string(),
        selected: chosen.iter().map(|&j| names[j].clone()).collect(),
        scores: names.into_iter().zip(scores).collect(),
        lambda,
        mae: None,
    })
}

/// Test MAE of a median linear quantile regression on the selected features.
/// An empty selection fits the intercept only.
pub fn evaluate<S: AsRef<str>>(selected: &[S], split: &DatasetSplit) -> Result<f64> {
    let feats = crate::dataset::parse_features(selected)?;
    let xt = covariate_matrix(&split.train, &feats);
    let xv = covariate_matrix(&split.test, &feats);
    let model = fit_lqr(&xt, &split.train.ghi, &[0.5])?;
    let pred = model.predict_level(&xv, 0)?;
    mae(&split.test.ghi, &pred)
}

/// Selects on the training part and scores on the test part.
pub fn select_and_evaluate(method: SelectionMethod, split: &DatasetSplit, cfg: &SelectionConfig) -> Result<SelectionResult> {
    let mut r = select(method, &split.train, cfg)?;
    r.mae = Some(evaluate(&r.selected, split)?);
    Ok(r)
}

/// One `Method,MAE` row per result.
pub fn write_summary_csv<W: Write>(results: &[SelectionResult], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["Method", "MAE"])?;
    for r in results {
        let m = r.mae.map(|v| format!("{v}")).unwrap_or_else(|| "NA".into());
        wr.write_record([r.method.as_str(), m.as_str()])?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_threshold_cases() {
        assert_eq!(soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(soft_threshold(-3.0, 1.0), -2.0);
        assert_eq!(soft_threshold(0.5, 1.0), 0.0);
    }

    #[test]
    fn null_penalty_threshold() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.5, -1.0, 0.2, 1.0, -0.4, -1.0, -0.3]);
        let y = DVector::from_column_slice(&[1.0, -2.0, 0.5, 0.3]);
        let lm = lambda_max(&x, &y, 1.0);
        assert!(lasso(&x, &y, lm).unwrap().iter().all(|b| *b == 0.0));
        assert!(lasso(&x, &y, 0.99 * lm).unwrap().iter().any(|b| *b != 0.0));
    }

    #[test]
    fn grid_endpoints() {
        let g = lambda_grid(2.0, 100, 1e-4);
        assert_eq!(g.len(), 100);
        assert_eq!(g[0], 2.0);
        assert!((g[99] - 2e-4).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_arguments() {
        let x = DMatrix::from_element(3, 1, 1.0);
        let y = DVector::from_element(3, 1.0);
        assert!(elastic_net(&x, &y, -1.0, 0.5).is_err());
        assert!(elastic_net(&x, &y, 1.0, 1.5).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in SelectionMethod::ALL {
            assert_eq!(SelectionMethod::from_name(m.name()).unwrap(), m);
        }
    }
}
