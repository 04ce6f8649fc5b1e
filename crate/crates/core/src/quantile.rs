//! Quantile forecasts, pinball loss, and the quantile-regression combiners:
//! linear (QRA), additive spline (AQR), partially linear additive (PLAQR)
//! and a one-hidden-layer quantile network (QRNN).

use std::io::Write;
use std::ops::Range;

use chrono::{DateTime, FixedOffset};
use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{independent_columns, select_columns, select_rows, with_intercept};
use crate::optim::{minimize_bfgs, BfgsOptions};

/// Default quantile grid 0.05, 0.10, ..., 0.95.
pub fn default_levels() -> Vec<f64> {
    (1..=19).map(|i| (i as f64 * 0.05 * 100.0).round() / 100.0).collect()
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::arg(format!("quantile level {tau} outside (0,1)")))
    }
}

fn check_levels(levels: &[f64]) -> Result<()> {
    if levels.is_empty() {
        return Err(Error::arg("no quantile levels"));
    }
    for &t in levels {
        check_tau(t)?;
    }
    if levels.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::arg("quantile levels must be strictly increasing"));
    }
    Ok(())
}

/// Pinball loss with the factor-2 convention, so that level 0.5 gives the
/// absolute error.
pub fn pinball(y: f64, q: f64, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let d = y - q;
    Ok(if d < 0.0 { 2.0 * (1.0 - tau) * -d } else { 2.0 * tau * d })
}

/// Check function ρ_τ(u) = u(τ - 1{u<0}).
#[inline]
pub fn check_loss(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        (tau - 1.0) * u
    } else {
        tau * u
    }
}

/// Predictive quantiles on a time × level grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileForecast {
    pub levels: Vec<f64>,
    pub values: DMatrix<f64>,
    pub point: Vec<f64>,
}

/// Linear interpolation of a sorted quantile row at level `tau`.
fn interp_row(levels: &[f64], row: &[f64], tau: f64) -> f64 {
    if tau <= levels[0] {
        return row[0];
    }
    let last = levels.len() - 1;
    if tau >= levels[last] {
        return row[last];
    }
    let j = levels.partition_point(|&l| l <= tau);
    let (l0, l1) = (levels[j - 1], levels[j]);
    row[j - 1] + (row[j] - row[j - 1]) * (tau - l0) / (l1 - l0)
}

impl QuantileForecast {
    /// Builds a forecast, rearranging each row and using the median as point.
    pub fn new(levels: Vec<f64>, values: DMatrix<f64>) -> Result<Self> {
        check_levels(&levels)?;
        if values.ncols() != levels.len() {
            return Err(Error::arg(format!("{} value columns for {} levels", values.ncols(), levels.len())));
        }
        let mut f = Self { levels, values, point: Vec::new() };
        f.rearrange();
        f.point = (0..f.len()).map(|t| f.quantile_at(t, 0.5)).collect();
        Ok(f)
    }

    pub fn with_point(levels: Vec<f64>, values: DMatrix<f64>, point: Vec<f64>) -> Result<Self> {
        let mut f = Self::new(levels, values)?;
        if point.len() != f.len() {
            return Err(Error::arg("point forecast length differs from quantile rows"));
        }
        f.point = point;
        Ok(f)
    }

    /// Gaussian predictive quantiles.
    pub fn from_gaussian(mean: &[f64], var: &[f64], levels: &[f64]) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::arg("mean and variance lengths differ"));
        }
        check_levels(levels)?;
        let z: Vec<f64> = levels.iter().map(|&t| normal_quantile(t)).collect();
        let values = DMatrix::from_fn(mean.len(), levels.len(), |i, j| mean[i] + z[j] * var[i].max(0.0).sqrt());
        Self::with_point(levels.to_vec(), values, mean.to_vec())
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sorts every row so quantiles are non-decreasing in the level.
    pub fn rearrange(&mut self) {
        for mut row in self.values.row_iter_mut() {
            let mut v: Vec<f64> = row.iter().copied().collect();
            v.sort_by(f64::total_cmp);
            for (dst, src) in row.iter_mut().zip(v) {
                *dst = src;
            }
        }
    }

    /// Clamps quantiles and point forecasts from below.
    pub fn clamp_min(&mut self, lo: f64) {
        self.values.apply(|v| *v = v.max(lo));
        for p in &mut self.point {
            *p = p.max(lo);
        }
    }

    /// Interpolated quantile of row `t` at level `tau`.
    pub fn quantile_at(&self, t: usize, tau: f64) -> f64 {
        let row: Vec<f64> = self.values.row(t).iter().copied().collect();
        interp_row(&self.levels, &row, tau)
    }

    pub fn level_column(&self, tau: f64) -> Vec<f64> {
        (0..self.len()).map(|t| self.quantile_at(t, tau)).collect()
    }

    pub fn slice(&self, range: Range<usize>) -> Self {
        let rows: Vec<usize> = range.collect();
        Self {
            levels: self.levels.clone(),
            values: select_rows(&self.values, &rows),
            point: rows.iter().map(|&i| self.point[i]).collect(),
        }
    }

    /// CSV with a timestamp column, one column per level and a point column.
    pub fn write_csv<W: Write>(&self, timestamps: &[DateTime<FixedOffset>], w: W) -> Result<()> {
        if timestamps.len() != self.len() {
            return Err(Error::arg("timestamp count differs from forecast rows"));
        }
        let mut w = csv::Writer::from_writer(w);
        let mut header = vec!["timestamp".to_string()];
        header.extend(self.levels.iter().map(|t| format!("q{t}")));
        header.push("point".into());
        w.write_record(&header)?;
        for (t, ts) in timestamps.iter().enumerate() {
            let mut rec = vec![ts.format("%Y-%m-%dT%H:%M:%S%:z").to_string()];
            rec.extend(self.values.row(t).iter().map(|v| format!("{v}")));
            rec.push(format!("{}", self.point[t]));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    Normal::standard().inverse_cdf(p)
}

fn objective(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>, tau: f64, penalty: Option<&DMatrix<f64>>) -> f64 {
    let r = y - x * beta;
    let mut s: f64 = r.iter().map(|&u| check_loss(u, tau)).sum();
    if let Some(p) = penalty {
        s += beta.dot(&(p * beta));
    }
    s
}

fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let scale = a.diagonal().amax().max(1e-300);
    let mut jitter = 0.0;
    for _ in 0..8 {
        let mut m = a.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        if let Some(c) = m.cholesky() {
            let s = c.solve(b);
            if s.iter().all(|v| v.is_finite()) {
                return Some(s);
            }
        }
        jitter = if jitter == 0.0 { 1e-12 * scale } else { jitter * 100.0 };
    }
    None
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Minimizes `Σ ρ_τ(y - Xβ) + βᵀPβ`.
///
/// Majorize-minimize iteratively reweighted least squares with the
/// perturbation annealed toward 0. Without a penalty the result is then
/// snapped to an interpolating basic solution and improved by basis
/// exchanges, so it is an exact minimizer of the linear program.
pub fn fit_quantile_core(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    tau: f64,
    penalty: Option<&DMatrix<f64>>,
    warm: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    check_tau(tau)?;
    let (n, p) = x.shape();
    if n != y.len() {
        return Err(Error::arg("design and target lengths differ"));
    }
    if n == 0 || p == 0 {
        return Err(Error::arg("empty quantile regression problem"));
    }
    let yv: Vec<f64> = y.iter().copied().collect();
    let med = median(&yv);
    let mut scale = yv.iter().map(|v| (v - med).abs()).sum::<f64>() / n as f64;
    if !(scale > 0.0) {
        scale = med.abs().max(1.0);
    }

    let xt = x.transpose();
    let ones_term = x.row_sum().transpose() * (2.0 * tau - 1.0);
    let pen4 = penalty.map(|p| p * 4.0);

    let mut beta = match warm {
        Some(b) if b.len() == p => b.clone(),
        _ => {
            let mut a = &xt * x;
            if let Some(p4) = &pen4 {
                a += p4;
            }
            solve_spd(&a, &(&xt * y)).ok_or_else(|| Error::numerical("singular quantile regression design"))?
        }
    };
    let mut best = beta.clone();
    let mut best_f = objective(x, y, &beta, tau, penalty);

    let mut eps = 1e-2 * scale;
    while eps >= 1e-10 * scale {
        let mut prev_f = f64::INFINITY;
        for _ in 0..100 {
            let r = y - x * &beta;
            let w: Vec<f64> = r.iter().map(|u| 1.0 / (eps + u.abs())).collect();
            let mut xw = xt.clone();
            for (j, wj) in w.iter().enumerate() {
                xw.column_mut(j).scale_mut(*wj);
            }
            let mut a = &xw * x;
            if let Some(p4) = &pen4 {
                a += p4;
            }
            let rhs = &xw * y + &ones_term;
            let Some(next) = solve_spd(&a, &rhs) else { break };
            let step = (&next - &beta).amax();
            beta = next;
            let f = objective(x, y, &beta, tau, penalty);
            if f < best_f {
                best_f = f;
                best = beta.clone();
            }
            if step <= 1e-12 * (1.0 + beta.amax()) || (prev_f - f).abs() <= 1e-12 * f.abs().max(scale) {
                break;
            }
            prev_f = f;
        }
        eps *= 0.01;
    }

    if penalty.is_none() && n >= p {
        if let Some((b, f)) = polish_basis(x, y, tau, &best) {
            if f <= best_f {
                best = b;
            }
        }
    }
    Ok(best)
}

/// Rows that can serve as an interpolation basis, greedily by |residual|.
fn basis_rows(x: &DMatrix<f64>, order: &[usize]) -> Option<Vec<usize>> {
    let p = x.ncols();
    let mut q: Vec<DVector<f64>> = Vec::new();
    let mut rows = Vec::new();
    for &i in order {
        let mut v = x.row(i).transpose();
        let n0 = v.norm();
        if n0 == 0.0 {
            continue;
        }
        for b in &q {
            let c = b.dot(&v);
            v -= b * c;
        }
        let nv = v.norm();
        if nv > 1e-9 * n0 {
            q.push(v / nv);
            rows.push(i);
            if rows.len() == p {
                return Some(rows);
            }
        }
    }
    None
}

fn interpolate(x: &DMatrix<f64>, y: &DVector<f64>, rows: &[usize]) -> Option<DVector<f64>> {
    let xh = select_rows(x, rows);
    let yh = DVector::from_iterator(rows.len(), rows.iter().map(|&i| y[i]));
    let lu = xh.lu();
    let b = lu.solve(&yh)?;
    b.iter().all(|v| v.is_finite()).then_some(b)
}

fn polish_basis(x: &DMatrix<f64>, y: &DVector<f64>, tau: f64, beta: &DVector<f64>) -> Option<(DVector<f64>, f64)> {
    let (n, p) = x.shape();
    let r = y - x * beta;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| r[a].abs().total_cmp(&r[b].abs()).then(a.cmp(&b)));
    let mut basis = basis_rows(x, &order)?;
    let mut b = interpolate(x, y, &basis)?;
    let mut f = objective(x, y, &b, tau, None);

    let ncand = (10 * p + 20).min(n);
    for _ in 0..1000 {
        let r = y - x * &b;
        let mut cand: Vec<usize> = (0..n).filter(|i| !basis.contains(i)).collect();
        cand.sort_by(|&a, &c| r[a].abs().total_cmp(&r[c].abs()).then(a.cmp(&c)));
        cand.truncate(ncand);
        let mut improved = None;
        'search: for slot in 0..p {
            for &i in &cand {
                let mut trial = basis.clone();
                trial[slot] = i;
                if let Some(bt) = interpolate(x, y, &trial) {
                    let ft = objective(x, y, &bt, tau, None);
                    if ft < f - 1e-13 * f.abs().max(1e-300) {
                        improved = Some((trial, bt, ft));
                        break 'search;
                    }
                }
            }
        }
        match improved {
            Some((t, bt, ft)) => {
                basis = t;
                b = bt;
                f = ft;
            }
            None => break,
        }
    }
    Some((b, f))
}

/// Linear quantile regression with intercept, one coefficient vector per level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqrModel {
    pub levels: Vec<f64>,
    /// Input columns retained after dropping collinear ones.
    pub kept: Vec<usize>,
    pub n_features: usize,
    /// Per level: intercept followed by coefficients of `kept` columns.
    pub coefs: Vec<Vec<f64>>,
}

pub fn fit_lqr(x: &DMatrix<f64>, y: &[f64], levels: &[f64]) -> Result<LqrModel> {
    check_levels(levels)?;
    let (n, d) = x.shape();
    if n != y.len() {
        return Err(Error::arg(format!("{n} design rows vs {} targets", y.len())));
    }
    if n <= d {
        return Err(Error::arg(format!("linear quantile regression needs N > d (N={n}, d={d})")));
    }
    let xi = with_intercept(x);
    let cols = independent_columns(&xi, 1e-10);
    if !cols.contains(&0) {
        return Err(Error::numerical("intercept column is degenerate"));
    }
    if cols.len() < d + 1 {
        warn!("dropping {} collinear column(s) from quantile regression design", d + 1 - cols.len());
    }
    let xs = select_columns(&xi, &cols);
    let yv = DVector::from_column_slice(y);
    let coefs = levels
        .par_iter()
        .map(|&tau| fit_quantile_core(&xs, &yv, tau, None, None).map(|b| b.iter().copied().collect()))
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(LqrModel { levels: levels.to_vec(), kept: cols[1..].iter().map(|c| c - 1).collect(), n_features: d, coefs })
}

impl LqrModel {
    pub fn predict_level(&self, x: &DMatrix<f64>, level: usize) -> Result<Vec<f64>> {
        if x.ncols() != self.n_features {
            return Err(Error::arg(format!("expected {} features, got {}", self.n_features, x.ncols())));
        }
        let c = &self.coefs[level];
        Ok((0..x.nrows())
            .map(|i| c[0] + self.kept.iter().enumerate().map(|(k, &j)| c[k + 1] * x[(i, j)]).sum::<f64>())
            .collect())
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<QuantileForecast> {
        let mut values = DMatrix::zeros(x.nrows(), self.levels.len());
        for l in 0..self.levels.len() {
            let col = self.predict_level(x, l)?;
            values.set_column(l, &DVector::from_vec(col));
        }
        QuantileForecast::new(self.levels.clone(), values)
    }
}

/// Natural cubic regression spline parameterized by its values at the knots,
/// reparameterized to sum to zero over the training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineTerm {
    pub knots: Vec<f64>,
    /// Maps knot values to second derivatives at the knots (k × k).
    f_map: DMatrix<f64>,
    /// Null-space basis of the sum-to-zero constraint (k × (k-1)).
    z: DMatrix<f64>,
    /// Wiggliness penalty in the constrained basis.
    penalty: DMatrix<f64>,
}

impl SplineTerm {
    /// Builds a term with `q` knots at quantiles of the distinct values of `x`.
    pub fn new(x: &[f64], q: usize) -> Result<Self> {
        if q < 3 {
            return Err(Error::Spec(format!("spline basis dimension must be at least 3, got {q}")));
        }
        let mut u: Vec<f64> = x.to_vec();
        u.sort_by(f64::total_cmp);
        u.dedup();
        if u.len() < q {
            return Err(Error::Spec(format!("basis dimension {q} exceeds the {} distinct covariate values", u.len())));
        }
        let knots: Vec<f64> = (0..q).map(|i| u[((i * (u.len() - 1)) as f64 / (q - 1) as f64).round() as usize]).collect();
        let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
        let k = q;
        let mut d = DMatrix::zeros(k - 2, k);
        let mut b = DMatrix::zeros(k - 2, k - 2);
        for i in 0..k - 2 {
            d[(i, i)] = 1.0 / h[i];
            d[(i, i + 1)] = -1.0 / h[i] - 1.0 / h[i + 1];
            d[(i, i + 2)] = 1.0 / h[i + 1];
            b[(i, i)] = (h[i] + h[i + 1]) / 3.0;
            if i + 1 < k - 2 {
                b[(i, i + 1)] = h[i + 1] / 6.0;
                b[(i + 1, i)] = h[i + 1] / 6.0;
            }
        }
        let bchol = b.clone().cholesky().ok_or_else(|| Error::numerical("spline band matrix not positive definite"))?;
        let binv_d = bchol.solve(&d);
        let mut f_map = DMatrix::zeros(k, k);
        f_map.rows_mut(1, k - 2).copy_from(&binv_d);
        let s_full = d.transpose() * &binv_d;

        let mut term = Self { knots, f_map, z: DMatrix::identity(k, k), penalty: s_full.clone() };
        let raw = term.raw_basis(x);
        let c = raw.row_sum().transpose();
        let z = householder_null(&c);
        term.penalty = z.transpose() * s_full * &z;
        term.z = z;
        Ok(term)
    }

    pub fn dim(&self) -> usize {
        self.z.ncols()
    }

    pub fn penalty(&self) -> &DMatrix<f64> {
        &self.penalty
    }

    fn raw_row(&self, x: f64, out: &mut [f64]) {
        let kn = &self.knots;
        let k = kn.len();
        out.iter_mut().for_each(|v| *v = 0.0);
        // Coefficient on knot values (a) and on second derivatives (c).
        let mut a = vec![0.0; k];
        let mut c = vec![0.0; k];
        if x <= kn[0] {
            let h = kn[1] - kn[0];
            let dx = x - kn[0];
            a[0] = 1.0 - dx / h;
            a[1] = dx / h;
            c[0] = -dx * h / 3.0;
            c[1] = -dx * h / 6.0;
        } else if x >= kn[k - 1] {
            let h = kn[k - 1] - kn[k - 2];
            let dx = x - kn[k - 1];
            a[k - 1] = 1.0 + dx / h;
            a[k - 2] = -dx / h;
            c[k - 2] = dx * h / 6.0;
            c[k - 1] = dx * h / 3.0;
        } else {
            let j = (kn.partition_point(|&t| t <= x) - 1).min(k - 2);
            let h = kn[j + 1] - kn[j];
            let (lm, lp) = (kn[j + 1] - x, x - kn[j]);
            a[j] = lm / h;
            a[j + 1] = lp / h;
            c[j] = (lm * lm * lm / h - h * lm) / 6.0;
            c[j + 1] = (lp * lp * lp / h - h * lp) / 6.0;
        }
        for m in 0..k {
            let mut v = a[m];
            for (j, cj) in c.iter().enumerate() {
                if *cj != 0.0 {
                    v += cj * self.f_map[(j, m)];
                }
            }
            out[m] = v;
        }
    }

    fn raw_basis(&self, x: &[f64]) -> DMatrix<f64> {
        let k = self.knots.len();
        let mut m = DMatrix::zeros(x.len(), k);
        let mut row = vec![0.0; k];
        for (i, &xi) in x.iter().enumerate() {
            self.raw_row(xi, &mut row);
            for j in 0..k {
                m[(i, j)] = row[j];
            }
        }
        m
    }

    /// Constrained basis evaluated at `x` (rows × dim).
    pub fn basis(&self, x: &[f64]) -> DMatrix<f64> {
        self.raw_basis(x) * &self.z
    }
}

/// Orthonormal basis of the complement of `c`, via a Householder reflection.
fn householder_null(c: &DVector<f64>) -> DMatrix<f64> {
    let k = c.len();
    let norm = c.norm();
    if norm == 0.0 {
        return DMatrix::identity(k, k).columns(1, k - 1).into_owned();
    }
    let s = if c[0] >= 0.0 { 1.0 } else { -1.0 };
    let mut u = c.clone();
    u[0] += s * norm;
    let h = DMatrix::identity(k, k) - &u * u.transpose() * (2.0 / u.dot(&u));
    h.columns(1, k - 1).into_owned()
}

/// Specification of an additive quantile model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AqrSpec {
    /// Per input column: smooth (spline) when true, linear otherwise.
    pub smooth: Vec<bool>,
    /// Basis dimension q of each smooth term.
    pub basis_dim: usize,
    /// Penalty weight; `None` selects it by validation on the held-out tail.
    pub penalty: Option<f64>,
}

impl AqrSpec {
    pub fn all_smooth(d: usize) -> Self {
        Self { smooth: vec![true; d], basis_dim: 10, penalty: None }
    }
}

/// Penalty weights tried during validation.
pub const PENALTY_GRID: [f64; 8] = [0.0, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0];

/// Fraction of the training rows held out (from the end) to choose the penalty.
pub const VALIDATION_TAIL: f64 = 0.2;

/// Additive quantile regression: intercept, linear terms and penalized
/// spline terms, fitted separately per level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdditiveModel {
    pub spec: AqrSpec,
    pub levels: Vec<f64>,
    pub terms: Vec<Option<SplineTerm>>,
    /// Design columns retained after dropping collinear ones.
    pub kept: Vec<usize>,
    pub coefs: Vec<Vec<f64>>,
    /// Penalty weight used at each level.
    pub penalties: Vec<f64>,
}

impl AdditiveModel {
    fn full_design(terms: &[Option<SplineTerm>], x: &DMatrix<f64>) -> DMatrix<f64> {
        let n = x.nrows();
        let width = 1 + terms.iter().map(|t| t.as_ref().map_or(1, |s| s.dim())).sum::<usize>();
        let mut m = DMatrix::zeros(n, width);
        m.column_mut(0).fill(1.0);
        let mut col = 1;
        for (j, t) in terms.iter().enumerate() {
            let xj: Vec<f64> = x.column(j).iter().copied().collect();
            match t {
                None => {
                    m.set_column(col, &DVector::from_vec(xj));
                    col += 1;
                }
                Some(s) => {
                    let b = s.basis(&xj);
                    m.columns_mut(col, s.dim()).copy_from(&b);
                    col += s.dim();
                }
            }
        }
        m
    }

    /// Block penalty scaled so weight 1 is comparable to the data term.
    fn penalty_matrix(terms: &[Option<SplineTerm>], design: &DMatrix<f64>, y_scale: f64) -> DMatrix<f64> {
        let p = design.ncols();
        let mut pen = DMatrix::zeros(p, p);
        let mut col = 1;
        for t in terms {
            match t {
                None => col += 1,
                Some(s) => {
                    let q = s.dim();
                    let xb = design.columns(col, q);
                    let gram = xb.transpose() * xb;
                    let sn = s.penalty().norm();
                    if sn > 0.0 {
                        let block = s.penalty() * (gram.norm() / sn / y_scale);
                        pen.view_mut((col, col), (q, q)).copy_from(&block);
                    }
                    col += q;
                }
            }
        }
        pen
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<QuantileForecast> {
        if x.ncols() != self.terms.len() {
            return Err(Error::arg(format!("expected {} features, got {}", self.terms.len(), x.ncols())));
        }
        let design = select_columns(&Self::full_design(&self.terms, x), &self.kept);
        let mut values = DMatrix::zeros(x.nrows(), self.levels.len());
        for (l, c) in self.coefs.iter().enumerate() {
            values.set_column(l, &(&design * DVector::from_column_slice(c)));
        }
        QuantileForecast::new(self.levels.clone(), values)
    }

    /// Value of smooth term `j` at `x` for level index `level` (centred).
    pub fn smooth_values(&self, j: usize, level: usize, x: &[f64]) -> Result<Vec<f64>> {
        let Some(term) = self.terms.get(j).and_then(|t| t.as_ref()) else {
            return Err(Error::arg(format!("feature {j} is not a smooth term")));
        };
        let mut offset = 1;
        for t in &self.terms[..j] {
            offset += t.as_ref().map_or(1, |s| s.dim());
        }
        let b = term.basis(x);
        let c = &self.coefs[level];
        Ok((0..x.len())
            .map(|i| {
                (0..term.dim())
                    .filter_map(|k| self.kept.iter().position(|&c| c == offset + k).map(|pos| b[(i, k)] * c[pos]))
                    .sum()
            })
            .collect())
    }

    /// Coefficient of a linear term at a level.
    pub fn linear_coef(&self, j: usize, level: usize) -> Option<f64> {
        if self.terms.get(j)?.is_some() {
            return None;
        }
        let mut col = 1;
        for t in &self.terms[..j] {
            col += t.as_ref().map_or(1, |s| s.dim());
        }
        self.kept.iter().position(|&c| c == col).map(|pos| self.coefs[level][pos])
    }
}

fn mean_check(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>, tau: f64) -> f64 {
    objective(x, y, beta, tau, None) / y.len() as f64
}

pub fn fit_aqr(x: &DMatrix<f64>, y: &[f64], spec: &AqrSpec, levels: &[f64]) -> Result<AdditiveModel> {
    check_levels(levels)?;
    let (n, d) = x.shape();
    if spec.smooth.len() != d {
        return Err(Error::Spec(format!("{} smooth flags for {d} features", spec.smooth.len())));
    }
    if n != y.len() {
        return Err(Error::arg(format!("{n} design rows vs {} targets", y.len())));
    }
    if let Some(p) = spec.penalty {
        if !(p >= 0.0) {
            return Err(Error::Spec(format!("negative penalty {p}")));
        }
    }
    let terms = (0..d)
        .map(|j| {
            if spec.smooth[j] {
                let xj: Vec<f64> = x.column(j).iter().copied().collect();
                SplineTerm::new(&xj, spec.basis_dim).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let full = AdditiveModel::full_design(&terms, x);
    if n <= full.ncols() {
        return Err(Error::arg(format!("additive model needs more rows ({n}) than coefficients ({})", full.ncols())));
    }
    let kept = independent_columns(&full, 1e-10);
    if kept.len() < full.ncols() {
        warn!("dropping {} collinear column(s) from additive design", full.ncols() - kept.len());
    }
    let design = select_columns(&full, &kept);
    let yv = DVector::from_column_slice(y);
    let med = median(y);
    let y_scale = (y.iter().map(|v| (v - med).abs()).sum::<f64>() / n as f64).max(1e-12);
    let pen_full = AdditiveModel::penalty_matrix(&terms, &full, y_scale);
    let pen = DMatrix::from_fn(kept.len(), kept.len(), |a, b| pen_full[(kept[a], kept[b])]);
    let has_smooth = terms.iter().any(|t| t.is_some());

    // Linear-in-features start, mapped into the additive basis.
    let xl = with_intercept(x);
    let lin_kept = independent_columns(&xl, 1e-10);
    let xl = select_columns(&xl, &lin_kept);

    let results: Vec<(Vec<f64>, f64)> = levels
        .par_iter()
        .map(|&tau| -> Result<(Vec<f64>, f64)> {
            if !has_smooth {
                let b = fit_quantile_core(&design, &yv, tau, None, None)?;
                return Ok((b.iter().copied().collect(), 0.0));
            }
            let lin = fit_quantile_core(&xl, &yv, tau, None, None)?;
            let fitted = &xl * lin;
            let gram = design.transpose() * &design;
            let warm = solve_spd(&gram, &(design.transpose() * &fitted));

            let lambda = match spec.penalty {
                Some(l) => l,
                None => {
                    let n_fit = ((1.0 - VALIDATION_TAIL) * n as f64).round() as usize;
                    let fit_rows: Vec<usize> = (0..n_fit).collect();
                    let val_rows: Vec<usize> = (n_fit..n).collect();
                    let (xf, xv) = (select_rows(&design, &fit_rows), select_rows(&design, &val_rows));
                    let yf = DVector::from_iterator(n_fit, fit_rows.iter().map(|&i| y[i]));
                    let yval = DVector::from_iterator(n - n_fit, val_rows.iter().map(|&i| y[i]));
                    let mut best = (f64::INFINITY, 0.0);
                    if val_rows.is_empty() || n_fit <= design.ncols() {
                        best.1 = 1e-3;
                    } else {
                        for &lam in &PENALTY_GRID {
                            let p = &pen * lam;
                            let Ok(b) = fit_quantile_core(&xf, &yf, tau, Some(&p), warm.as_ref()) else { continue };
                            let v = mean_check(&xv, &yval, &b, tau);
                            if v < best.0 - 1e-12 * v.abs() {
                                best = (v, lam);
                            }
                        }
                    }
                    best.1
                }
            };
            let p = &pen * lambda;
            let b = fit_quantile_core(&design, &yv, tau, Some(&p), warm.as_ref())?;
            let b = match &warm {
                Some(w) if objective(&design, &yv, w, tau, Some(&p)) < objective(&design, &yv, &b, tau, Some(&p)) => w.clone(),
                _ => b,
            };
            Ok((b.iter().copied().collect(), lambda))
        })
        .collect::<Result<Vec<_>>>()?;
    let (coefs, penalties) = results.into_iter().unzip();
    Ok(AdditiveModel { spec: spec.clone(), levels: levels.to_vec(), terms, kept, coefs, penalties })
}

/// Partially linear additive quantile regression over a feature partition.
pub fn fit_plaqr(
    x: &DMatrix<f64>,
    y: &[f64],
    linear: &[usize],
    smooth: &[usize],
    levels: &[f64],
    basis_dim: usize,
    penalty: Option<f64>,
) -> Result<AdditiveModel> {
    let d = x.ncols();
    let mut seen = vec![false; d];
    for &j in linear.iter().chain(smooth) {
        if j >= d {
            return Err(Error::arg(format!("feature index {j} out of range")));
        }
        if seen[j] {
            return Err(Error::arg(format!("feature {j} assigned to both linear and smooth parts")));
        }
        seen[j] = true;
    }
    if let Some(j) = seen.iter().position(|s| !s) {
        return Err(Error::arg(format!("feature {j} missing from the partition")));
    }
    let mut flags = vec![false; d];
    for &j in smooth {
        flags[j] = true;
    }
    fit_aqr(x, y, &AqrSpec { smooth: flags, basis_dim, penalty }, levels)
}

/// Quantile regression neural network settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QrnnConfig {
    pub hidden: usize,
    /// Penalty on input-to-hidden weights.
    pub lambda_w: f64,
    /// Penalty on hidden-to-output weights.
    pub lambda_v: f64,
    pub restarts: usize,
    pub max_iter: usize,
    /// Huber smoothing widths, as multiples of the target standard deviation.
    pub eps_schedule: Vec<f64>,
    pub seed: u64,
}

impl Default for QrnnConfig {
    fn default() -> Self {
        Self { hidden: 8, lambda_w: 1e-4, lambda_v: 1e-4, restarts: 3, max_iter: 500, eps_schedule: vec![1.0, 0.1, 0.01], seed: 0 }
    }
}

/// Network for one quantile level, in standardized coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QrnnNet {
    /// Hidden weights, row-major `hidden × (d + 1)` with the bias first.
    pub w: Vec<f64>,
    /// Output weights, bias first (`hidden + 1`).
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QrnnModel {
    pub levels: Vec<f64>,
    pub hidden: usize,
    pub x_mean: Vec<f64>,
    pub x_scale: Vec<f64>,
    pub y_mean: f64,
    pub y_scale: f64,
    pub nets: Vec<QrnnNet>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn huber(u: f64, eps: f64) -> (f64, f64) {
    if u.abs() <= eps {
        (u * u / (2.0 * eps), u / eps)
    } else {
        (u.abs() - eps / 2.0, u.signum())
    }
}

struct QrnnProblem<'a> {
    x: &'a DMatrix<f64>,
    y: &'a [f64],
    m: usize,
    tau: f64,
    lw: f64,
    lv: f64,
}

impl QrnnProblem<'_> {
    fn d(&self) -> usize {
        self.x.ncols()
    }

    fn forward(&self, theta: &[f64], xi: &[f64], h: &mut [f64]) -> f64 {
        let d = self.d();
        let (w, v) = theta.split_at(self.m * (d + 1));
        let mut out = v[0];
        for j in 0..self.m {
            let row = &w[j * (d + 1)..(j + 1) * (d + 1)];
            let z = row[0] + row[1..].iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
            h[j] = sigmoid(z);
            out += v[j + 1] * h[j];
        }
        out
    }

    fn penalty(&self, theta: &[f64]) -> f64 {
        let d = self.d();
        let (w, v) = theta.split_at(self.m * (d + 1));
        let sw: f64 = (0..self.m).flat_map(|j| (1..=d).map(move |k| j * (d + 1) + k)).map(|i| w[i] * w[i]).sum();
        let sv: f64 = v[1..].iter().map(|a| a * a).sum();
        self.lw * sw + self.lv * sv
    }

    /// Exact penalized mean check loss.
    fn loss(&self, theta: &[f64]) -> f64 {
        let n = self.y.len();
        let mut h = vec![0.0; self.m];
        let mut s = 0.0;
        let mut xi = vec![0.0; self.d()];
        for i in 0..n {
            for (k, v) in xi.iter_mut().enumerate() {
                *v = self.x[(i, k)];
            }
            s += check_loss(self.y[i] - self.forward(theta, &xi, &mut h), self.tau);
        }
        s / n as f64 + self.penalty(theta)
    }

    /// Huber-smoothed objective and gradient.
    fn smooth(&self, theta: &[f64], eps: f64) -> (f64, Vec<f64>) {
        let d = self.d();
        let n = self.y.len();
        let nw = self.m * (d + 1);
        let mut g = vec![0.0; theta.len()];
        let mut h = vec![0.0; self.m];
        let mut xi = vec![0.0; d];
        let mut f = 0.0;
        for i in 0..n {
            for (k, v) in xi.iter_mut().enumerate() {
                *v = self.x[(i, k)];
            }
            let out = self.forward(theta, &xi, &mut h);
            let u = self.y[i] - out;
            let (hv, hd) = huber(u, eps);
            let wgt = if u >= 0.0 { self.tau } else { 1.0 - self.tau };
            f += wgt * hv;
            // d/d out of wgt·huber(y - out)
            let dout = -wgt * hd;
            g[nw] += dout;
            for j in 0..self.m {
                g[nw + 1 + j] += dout * h[j];
                let dz = dout * theta[nw + 1 + j] * h[j] * (1.0 - h[j]);
                let base = j * (d + 1);
                g[base] += dz;
                for k in 0..d {
                    g[base + 1 + k] += dz * xi[k];
                }
            }
        }
        let inv = 1.0 / n as f64;
        f *= inv;
        g.iter_mut().for_each(|v| *v *= inv);
        f += self.penalty(theta);
        for j in 0..self.m {
            for k in 1..=d {
                let i = j * (d + 1) + k;
                g[i] += 2.0 * self.lw * theta[i];
            }
            g[nw + 1 + j] += 2.0 * self.lv * theta[nw + 1 + j];
        }
        (f, g)
    }
}

fn standardize_cols(x: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = x.nrows() as f64;
    let mut means = Vec::new();
    let mut scales = Vec::new();
    for c in x.column_iter() {
        let m = c.sum() / n;
        let var = c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0).max(1.0);
        means.push(m);
        scales.push(if var > 0.0 { var.sqrt() } else { 1.0 });
    }
    (means, scales)
}

pub fn fit_qrnn(x: &DMatrix<f64>, y: &[f64], levels: &[f64], cfg: &QrnnConfig) -> Result<QrnnModel> {
    check_levels(levels)?;
    if cfg.hidden < 1 {
        return Err(Error::arg("QRNN needs at least one hidden unit"));
    }
    if cfg.lambda_w < 0.0 || cfg.lambda_v < 0.0 {
        return Err(Error::arg("QRNN penalties must be non-negative"));
    }
    let (n, d) = x.shape();
    if n != y.len() || n < 2 {
        return Err(Error::arg("QRNN needs at least two rows matching the targets"));
    }
    let (x_mean, x_scale) = standardize_cols(x);
    let xs = DMatrix::from_fn(n, d, |i, j| (x[(i, j)] - x_mean[j]) / x_scale[j]);
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let y_var = y.iter().map(|v| (v - y_mean) * (v - y_mean)).sum::<f64>() / (n - 1) as f64;
    let y_scale = if y_var > 0.0 { y_var.sqrt() } else { 1.0 };
    let ys: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_scale).collect();
    let m = cfg.hidden;
    let dim = m * (d + 1) + m + 1;

    let nets = levels
        .par_iter()
        .enumerate()
        .map(|(li, &tau)| -> Result<QrnnNet> {
            let prob = QrnnProblem { x: &xs, y: &ys, m, tau, lw: cfg.lambda_w, lv: cfg.lambda_v };
            let mut sorted = ys.clone();
            sorted.sort_by(f64::total_cmp);
            let q0 = sorted[((tau * (n - 1) as f64).round() as usize).min(n - 1)];
            let mut best: Option<(Vec<f64>, f64)> = None;
            for r in 0..cfg.restarts.max(1) {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((li as u64) << 32) ^ (r as u64).wrapping_mul(0x9E37_79B9));
                let mut theta: Vec<f64> = (0..dim).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
                // Output bias starts at the level's empirical quantile.
                let mut hbuf = vec![0.0; m];
                let zero_x = vec![0.0; d];
                theta[m * (d + 1)] = 0.0;
                let c = prob.forward(&theta, &zero_x, &mut hbuf);
                theta[m * (d + 1)] = q0 - c;
                let init_loss = prob.loss(&theta);
                if !init_loss.is_finite() {
                    continue;
                }
                let mut cur = DVector::from_vec(theta.clone());
                for &e in &cfg.eps_schedule {
                    let eps = e.max(1e-12);
                    let lo = DVector::from_element(dim, -1e3);
                    let hi = DVector::from_element(dim, 1e3);
                    let res = minimize_bfgs(
                        |t: &DVector<f64>| {
                            let (f, g) = prob.smooth(t.as_slice(), eps);
                            (f, DVector::from_vec(g))
                        },
                        &cur,
                        &lo,
                        &hi,
                        BfgsOptions { max_iter: cfg.max_iter, f_tol: 1e-12, g_tol: 1e-9 },
                    );
                    if res.f.is_finite() {
                        cur = res.x;
                    }
                }
                let mut cand = cur.as_slice().to_vec();
                let mut cand_loss = prob.loss(&cand);
                if !(cand_loss <= init_loss) {
                    cand = theta;
                    cand_loss = init_loss;
                }
                if best.as_ref().is_none_or(|(_, l)| cand_loss < *l) {
                    best = Some((cand, cand_loss));
                }
            }
            let (theta, _) = best.ok_or_else(|| Error::numerical("QRNN loss non-finite at every start"))?;
            let nw = m * (d + 1);
            Ok(QrnnNet { w: theta[..nw].to_vec(), v: theta[nw..].to_vec() })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QrnnModel { levels: levels.to_vec(), hidden: m, x_mean, x_scale, y_mean, y_scale, nets })
}

impl QrnnModel {
    fn eval(&self, net: &QrnnNet, xi: &[f64]) -> f64 {
        let d = self.x_mean.len();
        let mut out = net.v[0];
        for j in 0..self.hidden {
            let row = &net.w[j * (d + 1)..(j + 1) * (d + 1)];
            let z = row[0] + (0..d).map(|k| row[k + 1] * (xi[k] - self.x_mean[k]) / self.x_scale[k]).sum::<f64>();
            out += net.v[j + 1] * sigmoid(z);
        }
        self.y_mean + self.y_scale * out
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<QuantileForecast> {
        let d = self.x_mean.len();
        if x.ncols() != d {
            return Err(Error::arg(format!("expected {d} features, got {}", x.ncols())));
        }
        let mut values = DMatrix::zeros(x.nrows(), self.levels.len());
        let mut xi = vec![0.0; d];
        for i in 0..x.nrows() {
            for (k, v) in xi.iter_mut().enumerate() {
                *v = x[(i, k)];
            }
            for (l, net) in self.nets.iter().enumerate() {
                values[(i, l)] = self.eval(net, &xi);
            }
        }
        QuantileForecast::new(self.levels.clone(), values)
    }

    /// Input-to-hidden weights (biases excluded) of level `l`, in standardized units.
    pub fn input_weights(&self, l: usize) -> Vec<f64> {
        let d = self.x_mean.len();
        let w = &self.nets[l].w;
        (0..self.hidden).flat_map(|j| (1..=d).map(move |k| w[j * (d + 1) + k])).collect()
    }
}

/// Forecast combination method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CombineMethod {
    Qra,
    Qrnn,
    Plaqr,
}

impl CombineMethod {
    pub fn name(self) -> &'static str {
        match self {
            CombineMethod::Qra => "QRA",
            CombineMethod::Qrnn => "QRNN",
            CombineMethod::Plaqr => "PLAQR",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CombineConfig {
    pub levels: Vec<f64>,
    /// Exclude night hours from fitting and forecast them as zero.
    pub exclude_night: bool,
    pub basis_dim: usize,
    /// Base columns entering PLAQR linearly; the rest are smooth.
    pub plaqr_linear: Vec<usize>,
    pub qrnn: QrnnConfig,
}

impl Default for CombineConfig {
    fn default() -> Self {
        Self { levels: default_levels(), exclude_night: true, basis_dim: 10, plaqr_linear: vec![0], qrnn: QrnnConfig::default() }
    }
}

/// Chronological combiner-training and evaluation windows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CombineWindows {
    pub train: Range<usize>,
    pub eval: Range<usize>,
}

impl CombineWindows {
    /// First half for combiner training, second half for evaluation.
    pub fn halves(n: usize) -> Self {
        let h = n / 2;
        Self { train: 0..h, eval: h..n }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombineOutput {
    pub forecast: QuantileForecast,
    /// Clock hours treated as night.
    pub night_hours: Vec<u32>,
    /// Fraction of fitting-window actuals below the fitted median.
    pub train_coverage_median: f64,
}

/// Hours of day whose observed values are all zero within `rows`.
pub fn night_hours(actuals: &[f64], hours: &[u32], rows: Range<usize>) -> Vec<u32> {
    let mut max = [f64::NEG_INFINITY; 24];
    for i in rows {
        let h = hours[i] as usize % 24;
        max[h] = max[h].max(actuals[i]);
    }
    (0..24u32).filter(|&h| max[h as usize] == 0.0).collect()
}

/// Fits a quantile combiner on the training window of base forecasts and
/// emits monotone, non-negative quantiles on the evaluation window.
pub fn combine(
    base: &[(String, Vec<f64>)],
    actuals: &[f64],
    hours: Option<&[u32]>,
    method: CombineMethod,
    windows: &CombineWindows,
    cfg: &CombineConfig,
) -> Result<CombineOutput> {
    let n = actuals.len();
    if base.is_empty() {
        return Err(Error::arg("no base forecasts to combine"));
    }
    for (name, col) in base {
        if col.len() != n {
            return Err(Error::arg(format!("base forecast '{name}' has {} rows for {n} actuals", col.len())));
        }
    }
    if let Some(h) = hours {
        if h.len() != n {
            return Err(Error::arg("hour column length differs from actuals"));
        }
    }
    let (tr, ev) = (&windows.train, &windows.eval);
    if tr.is_empty() || ev.is_empty() || tr.end > n || ev.end > n {
        return Err(Error::Protocol("combiner windows must be nonempty and within the series".into()));
    }
    if tr.start < ev.end && ev.start < tr.end {
        return Err(Error::Protocol(format!("evaluation window {ev:?} overlaps combiner-training window {tr:?}")));
    }
    if tr.end > ev.start {
        return Err(Error::Protocol("combiner-training window must precede the evaluation window".into()));
    }

    let night = match (cfg.exclude_night, hours) {
        (true, Some(h)) => night_hours(actuals, h, tr.clone()),
        _ => Vec::new(),
    };
    let is_night = |i: usize| hours.is_some_and(|h| night.contains(&h[i]));
    let fit_rows: Vec<usize> = tr.clone().filter(|&i| !is_night(i)).collect();
    let eval_rows: Vec<usize> = ev.clone().collect();
    let k = base.len();
    let xfit = DMatrix::from_fn(fit_rows.len(), k, |i, j| base[j].1[fit_rows[i]]);
    let yfit: Vec<f64> = fit_rows.iter().map(|&i| actuals[i]).collect();
    let xev = DMatrix::from_fn(eval_rows.len(), k, |i, j| base[j].1[eval_rows[i]]);

    let (fit_pred, mut fc) = match method {
        CombineMethod::Qra => {
            let m = fit_lqr(&xfit, &yfit, &cfg.levels)?;
            (m.predict(&xfit)?, m.predict(&xev)?)
        }
        CombineMethod::Qrnn => {
            let m = fit_qrnn(&xfit, &yfit, &cfg.levels, &cfg.qrnn)?;
            (m.predict(&xfit)?, m.predict(&xev)?)
        }
        CombineMethod::Plaqr => {
            let linear: Vec<usize> = cfg.plaqr_linear.iter().copied().filter(|&j| j < k).collect();
            let smooth: Vec<usize> = (0..k).filter(|j| !linear.contains(j)).collect();
            let m = fit_plaqr(&xfit, &yfit, &linear, &smooth, &cfg.levels, cfg.basis_dim, None)?;
            (m.predict(&xfit)?, m.predict(&xev)?)
        }
    };
    let med = fit_pred.level_column(0.5);
    let below = yfit.iter().zip(&med).filter(|(y, m)| y < m).count();
    let train_coverage_median = below as f64 / yfit.len().max(1) as f64;

    for (r, &i) in eval_rows.iter().enumerate() {
        if is_night(i) {
            fc.values.row_mut(r).fill(0.0);
            fc.point[r] = 0.0;
        }
    }
    fc.clamp_min(0.0);
    fc.rearrange();
    Ok(CombineOutput { forecast: fc, night_hours: night, train_coverage_median })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed;
        move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        }
    }

    #[test]
    fn pinball_examples() {
        assert_eq!(pinball(3.0, 3.0, 0.3).unwrap(), 0.0);
        assert_eq!(pinball(1.0, 0.0, 0.5).unwrap(), 1.0);
        assert!((pinball(0.0, 1.0, 0.9).unwrap() - 0.2).abs() < 1e-15);
        assert!(pinball(0.0, 1.0, 0.0).is_err());
        assert!(pinball(0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn normal_quantile_values() {
        assert!(normal_quantile(0.5).abs() < 1e-15);
        assert!((normal_quantile(0.975) - 1.959963984540054).abs() < 1e-12);
        assert!((normal_quantile(0.05) + 1.6448536269514722).abs() < 1e-12);
    }

    #[test]
    fn rearrangement_sorts_rows() {
        let f = QuantileForecast::new(vec![0.1, 0.5, 0.9], DMatrix::from_row_slice(1, 3, &[3.0, 1.0, 2.0])).unwrap();
        assert_eq!(f.values.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 2.0, 3.0]);
        assert_eq!(f.point, vec![2.0]);
        assert!(QuantileForecast::new(vec![0.5, 0.1], DMatrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn intercept_only_median() {
        let y = [5.0, 1.0, 9.0, 3.0, 7.0, 2.0, 8.0];
        let x = DMatrix::zeros(7, 0);
        let m = fit_lqr(&x, &y, &[0.5]).unwrap();
        assert!((m.coefs[0][0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn intercept_only_quantile_matches_grid_search() {
        let mut r = lcg(3);
        let y: Vec<f64> = (0..41).map(|_| 100.0 * r()).collect();
        for tau in [0.1, 0.25, 0.8] {
            let m = fit_lqr(&DMatrix::zeros(41, 0), &y, &[tau]).unwrap();
            let loss = |q: f64| y.iter().map(|&v| pinball(v, q, tau).unwrap()).sum::<f64>();
            let (mut bq, mut bl) = (0.0, f64::INFINITY);
            for i in 0..=100_000 {
                let q = i as f64 * 1e-3;
                let l = loss(q);
                if l < bl {
                    bl = l;
                    bq = q;
                }
            }
            assert!(loss(m.coefs[0][0]) <= bl + 1e-9, "tau={tau}");
            assert!((m.coefs[0][0] - bq).abs() < 2e-3, "tau={tau}: {} vs {bq}", m.coefs[0][0]);
        }
    }

    #[test]
    fn lqr_matches_exhaustive_basic_solutions() {
        let xs = [0.3, 1.1, 2.0, 2.7, 4.2, 5.0];
        let ys = [1.0, 2.9, 3.1, 6.4, 7.0, 11.2];
        let x = DMatrix::from_column_slice(6, 1, &xs);
        for tau in [0.3, 0.5, 0.7] {
            let m = fit_lqr(&x, &ys, &[tau]).unwrap();
            let obj = |a: f64, b: f64| xs.iter().zip(&ys).map(|(&xi, &yi)| check_loss(yi - a - b * xi, tau)).sum::<f64>();
            let mut best = (f64::INFINITY, 0.0, 0.0);
            for i in 0..6 {
                for j in i + 1..6 {
                    let b = (ys[j] - ys[i]) / (xs[j] - xs[i]);
                    let a = ys[i] - b * xs[i];
                    let o = obj(a, b);
                    if o < best.0 {
                        best = (o, a, b);
                    }
                }
            }
            let (a, b) = (m.coefs[0][0], m.coefs[0][1]);
            assert!((a - best.1).abs() < 1e-8 && (b - best.2).abs() < 1e-8, "tau={tau}: ({a},{b}) vs ({},{})", best.1, best.2);
        }
    }

    #[test]
    fn duplicated_rows_leave_minimizer_unchanged() {
        let mut r = lcg(11);
        let n = 30;
        let xs: Vec<f64> = (0..n).map(|_| r() * 10.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 5.0 * (r() - 0.5)).collect();
        let m1 = fit_lqr(&DMatrix::from_column_slice(n, 1, &xs), &ys, &[0.3]).unwrap();
        let xs2: Vec<f64> = xs.iter().chain(&xs).copied().collect();
        let ys2: Vec<f64> = ys.iter().chain(&ys).copied().collect();
        let m2 = fit_lqr(&DMatrix::from_column_slice(2 * n, 1, &xs2), &ys2, &[0.3]).unwrap();
        for (a, b) in m1.coefs[0].iter().zip(&m2.coefs[0]) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn collinear_column_dropped() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let x = DMatrix::from_fn(20, 2, |i, j| xs[i] * (j + 1) as f64);
        let y: Vec<f64> = xs.iter().map(|v| 1.0 + v).collect();
        let m = fit_lqr(&x, &y, &[0.5]).unwrap();
        assert_eq!(m.kept, vec![0]);
        let p = m.predict_level(&x, 0).unwrap();
        assert!(p.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-8));
    }

    #[test]
    fn spline_basis_reproduces_linear_functions() {
        let x: Vec<f64> = (0..50).map(|i| i as f64 * 0.2).collect();
        let s = SplineTerm::new(&x, 6).unwrap();
        let b = s.basis(&x);
        assert_eq!(b.ncols(), 5);
        // sum-to-zero over the data
        for c in b.column_iter() {
            assert!(c.sum().abs() < 1e-9);
        }
        let target = DVector::from_iterator(50, x.iter().map(|v| v - 4.9));
        let coef = (b.transpose() * &b).cholesky().unwrap().solve(&(b.transpose() * &target));
        assert!((&b * &coef - &target).amax() < 1e-9);
        // linear functions carry no penalty
        assert!(coef.dot(&(s.penalty() * &coef)).abs() < 1e-9);
        assert!(matches!(SplineTerm::new(&[1.0, 2.0, 3.0], 5), Err(Error::Spec(_))));
    }

    #[test]
    fn aqr_without_smooths_equals_lqr() {
        let mut r = lcg(5);
        let n = 60;
        let x = DMatrix::from_fn(n, 2, |_, _| r() * 4.0);
        let y: Vec<f64> = (0..n).map(|i| x[(i, 0)] - 0.5 * x[(i, 1)] + r()).collect();
        let levels = [0.25, 0.5];
        let lqr = fit_lqr(&x, &y, &levels).unwrap();
        let aqr = fit_aqr(&x, &y, &AqrSpec { smooth: vec![false, false], basis_dim: 10, penalty: None }, &levels).unwrap();
        for l in 0..2 {
            for (a, b) in lqr.coefs[l].iter().zip(&aqr.coefs[l]) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        let plaqr = fit_plaqr(&x, &y, &[0, 1], &[], &levels, 10, None).unwrap();
        assert_eq!(plaqr.coefs, aqr.coefs);
    }

    #[test]
    fn plaqr_partition_errors() {
        let x = DMatrix::from_fn(30, 2, |i, j| (i * (j + 1)) as f64);
        let y = vec![0.0; 30];
        assert!(fit_plaqr(&x, &y, &[0], &[0], &[0.5], 5, None).is_err());
        assert!(fit_plaqr(&x, &y, &[0], &[], &[0.5], 5, None).is_err());
    }

    #[test]
    fn combine_rejects_overlap() {
        let base = vec![("a".to_string(), vec![1.0; 10])];
        let w = CombineWindows { train: 0..6, eval: 5..10 };
        let e = combine(&base, &[1.0; 10], None, CombineMethod::Qra, &w, &CombineConfig::default()).unwrap_err();
        assert!(matches!(e, Error::Protocol(_)));
    }

    #[test]
    fn qrnn_constant_target() {
        let n = 40;
        let x = DMatrix::from_fn(n, 2, |i, j| (i as f64 * 0.37 + j as f64).sin());
        let y = vec![3.5; n];
        let cfg = QrnnConfig { hidden: 3, restarts: 1, ..Default::default() };
        let m = fit_qrnn(&x, &y, &[0.1, 0.5, 0.9], &cfg).unwrap();
        let p = m.predict(&x).unwrap();
        assert!(p.values.iter().all(|v| (v - 3.5).abs() < 1e-3), "{:?}", p.values.row(0));
    }
}
