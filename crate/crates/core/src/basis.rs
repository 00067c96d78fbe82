//! Basis covariances, harmonic averaging and the basis prior.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::weights::{TimePoints, WeightScheme};

/// D symmetric K×K basis covariances λ_d.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSet {
    pub lambdas: Vec<DMatrix<f64>>,
}

impl BasisSet {
    pub fn new(lambdas: Vec<DMatrix<f64>>) -> Result<Self> {
        let Some(first) = lambdas.first() else {
            return Err(Error::InvalidInput("basis set must be non-empty".into()));
        };
        let k = first.nrows();
        for (d, l) in lambdas.iter().enumerate() {
            if l.nrows() != k || l.ncols() != k {
                return Err(Error::DimensionMismatch(format!(
                    "basis {d} is {}x{}, expected {k}x{k}",
                    l.nrows(),
                    l.ncols()
                )));
            }
            if !linalg::is_symmetric(l, 1e-10) {
                return Err(Error::InvalidInput(format!("basis {d} is not symmetric")));
            }
        }
        Ok(Self { lambdas })
    }

    pub fn identity(d: usize, k: usize) -> Self {
        Self {
            lambdas: vec![DMatrix::identity(k, k); d],
        }
    }

    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.lambdas[0].nrows()
    }

    /// `C λ_d Cᵀ` for every basis.
    pub fn transformed(&self, c: &DMatrix<f64>) -> Self {
        Self {
            lambdas: self
                .lambdas
                .iter()
                .map(|l| {
                    let mut m = c * l * c.transpose();
                    linalg::symmetrize(&mut m);
                    m
                })
                .collect(),
        }
    }

    pub(crate) fn inverses(&self) -> Result<BasisInverses> {
        BasisInverses::new(self)
    }
}

/// Inverses and log-determinants of every basis, packed column-wise
/// (column d holds vec(λ_d⁻¹)) so that weighted sums become one product.
#[derive(Debug, Clone)]
pub(crate) struct BasisInverses {
    pub k: usize,
    pub inv: Vec<DMatrix<f64>>,
    pub log_det: Vec<f64>,
    pub packed: DMatrix<f64>,
}

impl BasisInverses {
    pub fn new(basis: &BasisSet) -> Result<Self> {
        let k = basis.dim();
        let mut inv = Vec::with_capacity(basis.len());
        let mut log_det = Vec::with_capacity(basis.len());
        let mut packed = DMatrix::zeros(k * k, basis.len());
        for (d, l) in basis.lambdas.iter().enumerate() {
            let (li, ld) = linalg::spd_inverse_logdet(l, &format!("basis {d}"))?;
            packed.column_mut(d).copy_from_slice(li.as_slice());
            inv.push(li);
            log_det.push(ld);
        }
        Ok(Self {
            k,
            inv,
            log_det,
            packed,
        })
    }

    /// Accumulated precisions Λ_{t_n}⁻¹ for the rows of an N×D weight matrix,
    /// returned as a K²×N matrix (column n = vec(Λ_{t_n}⁻¹)).
    pub fn precisions(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        &self.packed * w.transpose()
    }

    pub fn column(m: &DMatrix<f64>, n: usize, k: usize) -> DMatrix<f64> {
        let mut p = DMatrix::from_column_slice(k, k, m.column(n).as_slice());
        linalg::symmetrize(&mut p);
        p
    }
}

/// Λ_t = (Σ_d ω_d(t) λ_d⁻¹)⁻¹.
pub fn lambda_at(t: f64, basis: &BasisSet, scheme: &WeightScheme) -> Result<DMatrix<f64>> {
    check_counts(basis, scheme)?;
    if basis.len() == 1 {
        return Ok(basis.lambdas[0].clone());
    }
    let w = scheme.eval(t)?;
    let k = basis.dim();
    let mut prec = DMatrix::zeros(k, k);
    for (d, l) in basis.lambdas.iter().enumerate() {
        if w[d] == 0.0 {
            continue;
        }
        let li = linalg::spd_inverse(l, &format!("basis {d}"))?;
        prec += li * w[d];
    }
    linalg::spd_inverse(&prec, &format!("accumulated precision at t = {t}"))
}

pub(crate) fn check_counts(basis: &BasisSet, scheme: &WeightScheme) -> Result<()> {
    if basis.len() != scheme.n_bases() {
        return Err(Error::DimensionMismatch(format!(
            "{} bases but {} weight centers",
            basis.len(),
            scheme.n_bases()
        )));
    }
    Ok(())
}

/// ½ Σₙ Σ_d ω_d(t_n) log|λ_d⁻¹| − ½ Σₙ log|Σ_d ω_d(t_n) λ_d⁻¹|.
pub fn log_prior_basis(basis: &BasisSet, scheme: &WeightScheme, times: &TimePoints) -> Result<f64> {
    check_counts(basis, scheme)?;
    let w = scheme.matrix(times.as_slice())?;
    let inv = basis.inverses()?;
    let prec = inv.precisions(&w);
    log_prior_from_parts(&w, &inv, &prec)
}

pub(crate) fn log_prior_from_parts(
    w: &DMatrix<f64>,
    inv: &BasisInverses,
    prec: &DMatrix<f64>,
) -> Result<f64> {
    let k = inv.k;
    let mut total = 0.0;
    for n in 0..w.nrows() {
        let weighted: f64 = (0..w.ncols()).map(|d| w[(n, d)] * inv.log_det[d]).sum();
        let p = BasisInverses::column(prec, n, k);
        let ld = linalg::spd_log_det(&p, "accumulated precision")?;
        total += -0.5 * weighted - 0.5 * ld;
    }
    Ok(total)
}

/// Scalar version of the basis prior for one coordinate's basis scalars.
pub fn log_prior_scalars(values: &[f64], w: &DMatrix<f64>) -> Result<f64> {
    if values.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidInput("basis scalars must be positive".into()));
    }
    let mut total = 0.0;
    for n in 0..w.nrows() {
        let mut weighted = 0.0;
        let mut prec = 0.0;
        for (d, v) in values.iter().enumerate() {
            weighted += w[(n, d)] * v.ln();
            prec += w[(n, d)] / v;
        }
        total += -0.5 * weighted - 0.5 * prec.ln();
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn harmonic_average_of_diagonals() {
        let basis = BasisSet::new(vec![
            DMatrix::from_diagonal(&nalgebra::dvector![1.0, 2.0]),
            DMatrix::from_diagonal(&nalgebra::dvector![3.0, 6.0]),
        ])
        .unwrap();
        let scheme = WeightScheme::new(vec![0.0, 10.0], vec![4.0]).unwrap();
        let l = lambda_at(5.0, &basis, &scheme).unwrap();
        let expect = DMatrix::from_diagonal(&nalgebra::dvector![1.5, 3.0]);
        assert_relative_eq!(l, expect, epsilon = 1e-12);
    }

    #[test]
    fn single_and_identical_bases() {
        let l0 = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let one = BasisSet::new(vec![l0.clone()]).unwrap();
        let s1 = WeightScheme::homoscedastic();
        assert_eq!(lambda_at(3.0, &one, &s1).unwrap(), l0);
        let same = BasisSet::new(vec![l0.clone(); 3]).unwrap();
        let s3 = WeightScheme::new(vec![0.0, 1.0, 2.0], vec![1.0]).unwrap();
        assert_relative_eq!(lambda_at(0.4, &same, &s3).unwrap(), l0, epsilon = 1e-12);

        let times = TimePoints::regular(5);
        assert!(log_prior_basis(&one, &s1, &times).unwrap().abs() < 1e-12);
        assert!(log_prior_basis(&same, &s3, &times).unwrap().abs() < 1e-10);
    }

    #[test]
    fn distinct_bases_have_negative_prior() {
        let basis = BasisSet::new(vec![
            DMatrix::from_diagonal(&nalgebra::dvector![1.0, 2.0]),
            DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]),
        ])
        .unwrap();
        let scheme = WeightScheme::new(vec![1.0, 3.0], vec![2.0]).unwrap();
        let times = TimePoints::regular(4);
        assert!(log_prior_basis(&basis, &scheme, &times).unwrap() < -1e-6);
    }

    #[test]
    fn scalar_prior_matches_matrix_prior() {
        let w = WeightScheme::new(vec![1.0, 2.0, 4.0], vec![1.5])
            .unwrap()
            .matrix(&[1.0, 2.5, 3.0])
            .unwrap();
        let vals = [0.5, 2.0, 1.3];
        let basis = BasisSet::new(
            vals.iter()
                .map(|v| DMatrix::from_element(1, 1, *v))
                .collect(),
        )
        .unwrap();
        let scheme = WeightScheme::new(vec![1.0, 2.0, 4.0], vec![1.5]).unwrap();
        let times = TimePoints::new(vec![1.0, 2.5, 3.0]).unwrap();
        assert_relative_eq!(
            log_prior_scalars(&vals, &w).unwrap(),
            log_prior_basis(&basis, &scheme, &times).unwrap(),
            epsilon = 1e-13
        );
    }
}
