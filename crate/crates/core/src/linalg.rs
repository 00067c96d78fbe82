//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative jitter added once when a Cholesky factorization fails.
pub const JITTER: f64 = 1e-10;

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Cholesky factor of a symmetric positive definite matrix. On failure a
/// jitter of `1e-10 * tr(M) / K` is added to the diagonal and the
/// factorization retried once.
pub fn cholesky(m: &DMatrix<f64>, context: &str) -> Result<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: context.to_string(),
        });
    }
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    let k = m.nrows().max(1) as f64;
    let jitter = JITTER * m.trace().abs().max(f64::MIN_POSITIVE) / k;
    let mut shifted = m.clone();
    for i in 0..m.nrows() {
        shifted[(i, i)] += jitter;
    }
    Cholesky::new(shifted).ok_or_else(|| Error::NotPositiveDefinite {
        context: context.to_string(),
    })
}

pub fn log_det_chol(c: &Cholesky<f64, Dyn>) -> f64 {
    let l = c.l_dirty();
    (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0
}

/// Inverse and log-determinant of an SPD matrix.
pub fn spd_inverse_logdet(m: &DMatrix<f64>, context: &str) -> Result<(DMatrix<f64>, f64)> {
    let c = cholesky(m, context)?;
    let ld = log_det_chol(&c);
    let mut inv = c.inverse();
    symmetrize(&mut inv);
    Ok((inv, ld))
}

pub fn spd_inverse(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    spd_inverse_logdet(m, context).map(|(inv, _)| inv)
}

pub fn spd_log_det(m: &DMatrix<f64>, context: &str) -> Result<f64> {
    cholesky(m, context).map(|c| log_det_chol(&c))
}

/// Solves `X A = R` for `X` with `A` symmetric positive definite.
pub fn solve_right_spd(r: &DMatrix<f64>, a: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let c = cholesky(a, context)?;
    let xt = c.solve(&r.transpose());
    Ok(xt.transpose())
}

/// Solves `X A = R` for a general square `A` via LU.
pub fn solve_right(r: &DMatrix<f64>, a: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let lu = a.transpose().lu();
    lu.solve(&r.transpose())
        .map(|x| x.transpose())
        .ok_or_else(|| Error::Singular {
            context: context.to_string(),
        })
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Column-major vectorization.
pub fn vec(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

pub fn unvec(v: &DVector<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, v.as_slice())
}

/// Symmetric eigendecomposition with eigenvalues sorted ascending.
pub fn sym_eigen_ascending(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let mut s = m.clone();
    symmetrize(&mut s);
    let eig = SymmetricEigen::new(s);
    let n = m.nrows();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = DVector::from_iterator(n, idx.iter().map(|&i| eig.eigenvalues[i]));
    let mut vecs = DMatrix::zeros(n, n);
    for (j, &i) in idx.iter().enumerate() {
        vecs.set_column(j, &eig.eigenvectors.column(i));
    }
    (vals, vecs)
}

/// Relative Frobenius distance `||a - b|| / max(||b||, tiny)`.
pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let scale = m.amax().max(1.0);
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > tol * scale {
                return false;
            }
        }
    }
    true
}
