//! Small dense linear-algebra helpers shared by the models.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Smallest relative jitter tried after a failed factorization.
pub const JITTER_START: f64 = 1e-10;
/// Largest relative jitter before giving up.
pub const JITTER_MAX: f64 = 1e-6;

/// A Cholesky factor together with the diagonal jitter that was needed to obtain it.
#[derive(Debug, Clone)]
pub struct JitteredCholesky {
    pub chol: Cholesky<f64, Dyn>,
    /// Absolute jitter added to the diagonal (0 when the plain matrix factored).
    pub jitter: f64,
}

impl JitteredCholesky {
    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// `log|A|` of the (jittered) matrix.
    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// Solves `L x = b` for the lower factor.
    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(b)
            .expect("cholesky factor has a positive diagonal")
    }

    pub fn solve_lower_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(b)
            .expect("cholesky factor has a positive diagonal")
    }
}

/// Cholesky factorization with jitter escalation.
///
/// Tries the matrix as given, then adds `scale * j` to the diagonal for
/// `j = 1e-10, 1e-9, ..., 1e-6`.
pub fn cholesky_jittered(a: &DMatrix<f64>, scale: f64) -> Result<JitteredCholesky> {
    if a.nrows() != a.ncols() {
        return Err(Error::arg("cholesky of a non-square matrix"));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("matrix contains non-finite entries"));
    }
    if let Some(chol) = Cholesky::new(a.clone()) {
        return Ok(JitteredCholesky { chol, jitter: 0.0 });
    }
    let scale = if scale > 0.0 && scale.is_finite() { scale } else { 1.0 };
    let mut rel = JITTER_START;
    while rel <= JITTER_MAX * (1.0 + 1e-9) {
        let mut m = a.clone();
        let jitter = rel * scale;
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(m) {
            return Ok(JitteredCholesky { chol, jitter });
        }
        rel *= 10.0;
    }
    Err(Error::numerical(format!(
        "matrix not positive definite after jitter {:e}",
        JITTER_MAX * scale
    )))
}

/// Ensures exact symmetry by averaging with the transpose.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Column indices forming a numerically independent subset, greedy in column order.
///
/// Uses modified Gram-Schmidt; a column is kept when its residual norm exceeds
/// `tol` times its original norm.
pub fn independent_columns(x: &DMatrix<f64>, tol: f64) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut keep = Vec::new();
    for j in 0..x.ncols() {
        let col = x.column(j).into_owned();
        let norm0 = col.norm();
        if norm0 == 0.0 {
            continue;
        }
        let mut r = col;
        for q in &basis {
            let c = q.dot(&r);
            r -= q * c;
        }
        let nr = r.norm();
        if nr > tol * norm0 {
            basis.push(r / nr);
            keep.push(j);
        }
    }
    keep
}

/// Selects the given columns of `x`.
pub fn select_columns(x: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), cols.len(), |i, j| x[(i, cols[j])])
}

/// Selects the given rows of `x`.
pub fn select_rows(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), x.ncols(), |i, j| x[(rows[i], j)])
}

/// Prepends a column of ones.
pub fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols() + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] })
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample variance (n - 1 denominator).
pub fn sample_variance(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jitter_rescues_singular_psd_matrix() {
        // rank-1 PSD matrix
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let a = &v * v.transpose();
        let f = cholesky_jittered(&a, 1.0).unwrap();
        assert!(f.jitter > 0.0 && f.jitter <= JITTER_MAX);
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(cholesky_jittered(&a, 1.0), Err(Error::Numerical(_))));
    }

    #[test]
    fn collinear_columns_are_dropped() {
        let x = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 0.0, 1.0, 2.0, 1.0, 1.0, 2.0, 5.0]);
        assert_eq!(independent_columns(&x, 1e-10), vec![0, 2]);
    }
}
