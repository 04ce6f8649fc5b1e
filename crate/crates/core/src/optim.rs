//! Box-constrained quasi-Newton minimization used for hyperparameter fitting.

use nalgebra::{DMatrix, DVector};

/// Stopping rules for [`minimize_bfgs`].
#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Stop when the relative objective decrease falls below this.
    pub f_tol: f64,
    /// Stop when the projected gradient infinity norm falls below this.
    pub g_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self { max_iter: 200, f_tol: 1e-10, g_tol: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: DVector<f64>,
    pub f: f64,
    pub iterations: usize,
}

fn project(x: &mut DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lower[i], upper[i]);
    }
}

/// Minimizes `f` inside the box `[lower, upper]`.
///
/// `fg` returns the objective and its gradient. Non-finite objective values
/// are treated as +inf, which makes the line search back off. The returned
/// point never has a larger objective than the (projected) start.
pub fn minimize_bfgs<F>(
    mut fg: F,
    x0: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    opts: BfgsOptions,
) -> BfgsResult
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let n = x0.len();
    let mut x = x0.clone();
    project(&mut x, lower, upper);
    let (mut f, mut g) = fg(&x);
    if !f.is_finite() {
        f = f64::INFINITY;
    }
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut iterations = 0;

    for it in 0..opts.max_iter {
        iterations = it + 1;
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
            break;
        }
        // Projected gradient: components pushing against an active bound are zeroed.
        let mut pg = g.clone();
        for i in 0..n {
            if (x[i] <= lower[i] && g[i] > 0.0) || (x[i] >= upper[i] && g[i] < 0.0) {
                pg[i] = 0.0;
            }
        }
        if pg.amax() < opts.g_tol {
            break;
        }
        let mut p = -(&h * &pg);
        if p.dot(&pg) >= 0.0 {
            h = DMatrix::identity(n, n);
            p = -pg.clone();
        }
        // Limit the first step so a unit-scale Hessian guess cannot jump out of range.
        let pmax = p.amax();
        if pmax > 5.0 {
            p *= 5.0 / pmax;
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut xn = &x + &p * step;
            project(&mut xn, lower, upper);
            let (fn_, gn) = fg(&xn);
            let s = &xn - &x;
            let decrease = g.dot(&s);
            if fn_.is_finite() && fn_ <= f + 1e-4 * decrease.min(0.0) && fn_ <= f {
                accepted = Some((xn, fn_, gn));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else { break };

        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        let rel_change = (f - fn_).abs() / f.abs().max(1.0);
        x = xn;
        f = fn_;
        g = gn;
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(n, n);
            let a = &i - &s * y.transpose() * rho;
            let b = &i - &y * s.transpose() * rho;
            h = &a * &h * &b + &s * s.transpose() * rho;
        }
        if rel_change < opts.f_tol {
            break;
        }
    }
    BfgsResult { x, f, iterations }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_rosenbrock() {
        let fg = |x: &DVector<f64>| {
            let (a, b) = (x[0], x[1]);
            let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = DVector::from_vec(vec![
                -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                200.0 * (b - a * a),
            ]);
            (f, g)
        };
        let lo = DVector::from_element(2, -5.0);
        let hi = DVector::from_element(2, 5.0);
        let r = minimize_bfgs(
            fg,
            &DVector::from_vec(vec![-1.2, 1.0]),
            &lo,
            &hi,
            BfgsOptions { max_iter: 500, f_tol: 1e-16, g_tol: 1e-10 },
        );
        assert!((r.x[0] - 1.0).abs() < 1e-4 && (r.x[1] - 1.0).abs() < 1e-4, "{:?}", r.x);
    }

    #[test]
    fn respects_bounds() {
        let fg = |x: &DVector<f64>| ((x[0] - 3.0).powi(2), DVector::from_vec(vec![2.0 * (x[0] - 3.0)]));
        let r = minimize_bfgs(
            fg,
            &DVector::from_vec(vec![0.0]),
            &DVector::from_vec(vec![-1.0]),
            &DVector::from_vec(vec![1.0]),
            BfgsOptions::default(),
        );
        assert_eq!(r.x[0], 1.0);
    }
}
