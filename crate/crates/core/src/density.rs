//! Gaussian and multivariate Student-t log-densities.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::linalg;
use crate::params::FactorModelParams;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Family {
    Gaussian,
    StudentT { nu: f64 },
}

impl Family {
    pub fn validate(&self) -> Result<()> {
        match self {
            Family::Gaussian => Ok(()),
            Family::StudentT { nu } if *nu > 0.0 && nu.is_finite() => Ok(()),
            Family::StudentT { .. } => Err(Error::InvalidInput(
                "degrees of freedom must be positive".into(),
            )),
        }
    }
}

/// Log-density from the dimension, log|M| and the quadratic form yᵀM⁻¹y.
pub fn log_pdf_from_parts(family: Family, q: usize, log_det: f64, quad: f64) -> f64 {
    let qf = q as f64;
    match family {
        Family::Gaussian => -0.5 * (qf * LN_2PI + log_det + quad),
        Family::StudentT { nu } => {
            ln_gamma(0.5 * (nu + qf)) - ln_gamma(0.5 * nu)
                - 0.5 * qf * (nu * std::f64::consts::PI).ln()
                - 0.5 * log_det
                - 0.5 * (nu + qf) * (quad / nu).ln_1p()
        }
    }
}

/// Log-density of `y` under a zero-mean law with a dense covariance.
pub fn log_pdf_dense(y: &DVector<f64>, cov: &DMatrix<f64>, family: Family) -> Result<f64> {
    if cov.nrows() != y.len() || cov.ncols() != y.len() {
        return Err(Error::DimensionMismatch("covariance does not match y".into()));
    }
    let c = linalg::cholesky(cov, "marginal covariance")?;
    let ld = linalg::log_det_chol(&c);
    let z = c.l().solve_lower_triangular(y).ok_or_else(|| Error::Singular {
        context: "marginal covariance".into(),
    })?;
    Ok(log_pdf_from_parts(family, y.len(), ld, z.norm_squared()))
}

/// Log-density of `y` at time `t` under 𝒩(0, BΛ_tBᵀ+Σ_t) or 𝒯_ν(0, ·).
/// The K-dimensional Woodbury form is used, so no Q×Q matrix is factored.
pub fn log_density(
    y: &DVector<f64>,
    t: f64,
    params: &FactorModelParams,
    family: Family,
) -> Result<f64> {
    if y.len() != params.q() {
        return Err(Error::DimensionMismatch(format!(
            "y has length {} but the model has Q = {}",
            y.len(),
            params.q()
        )));
    }
    let lambda = params.lambda_at(t)?;
    let sigma = params.sigma.at(t)?;
    let (log_det, quad) = woodbury_parts(y, &params.b, &lambda, &sigma)?;
    Ok(log_pdf_from_parts(family, y.len(), log_det, quad))
}

/// log|BΛBᵀ+Σ| and yᵀ(BΛBᵀ+Σ)⁻¹y for diagonal Σ.
pub(crate) fn woodbury_parts(
    y: &DVector<f64>,
    b: &DMatrix<f64>,
    lambda: &DMatrix<f64>,
    sigma: &DVector<f64>,
) -> Result<(f64, f64)> {
    let (lambda_inv, ld_lambda) = linalg::spd_inverse_logdet(lambda, "Lambda_t")?;
    let prec: DVector<f64> = sigma.map(|s| 1.0 / s);
    let mut bs = b.clone();
    for (q, mut row) in bs.row_iter_mut().enumerate() {
        row *= prec[q];
    }
    let g = b.transpose() * &bs;
    let h = bs.transpose() * y;
    let a = lambda_inv + g;
    let c = linalg::cholesky(&a, "posterior precision")?;
    let ld_a = linalg::log_det_chol(&c);
    let eta = c.solve(&h);
    let yy: f64 = y.iter().zip(prec.iter()).map(|(v, p)| v * v * p).sum();
    let ld_sigma: f64 = sigma.iter().map(|s| s.ln()).sum();
    Ok((ld_sigma + ld_lambda + ld_a, yy - h.dot(&eta)))
}

/// ½(tr(Σq⁻¹Σp) + Δᵀ Σq⁻¹ Δ − Q + log|Σq|/|Σp|) for 𝒩(μp,Σp) ‖ 𝒩(μq,Σq).
pub fn kl_gaussian(
    mu_p: &DVector<f64>,
    sigma_p: &DMatrix<f64>,
    mu_q: &DVector<f64>,
    sigma_q: &DMatrix<f64>,
) -> Result<f64> {
    let n = mu_p.len();
    if sigma_p.nrows() != n || sigma_q.nrows() != n || mu_q.len() != n {
        return Err(Error::DimensionMismatch("KL arguments disagree in size".into()));
    }
    let cp = linalg::cholesky(sigma_p, "KL first covariance")?;
    let cq = linalg::cholesky(sigma_q, "KL second covariance")?;
    let tr = cq.solve(sigma_p).trace();
    let delta = mu_q - mu_p;
    let maha = delta.dot(&cq.solve(&delta));
    let kl = 0.5 * (tr + maha - n as f64 + linalg::log_det_chol(&cq) - linalg::log_det_chol(&cp));
    Ok(kl.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisSet;
    use crate::params::Sigma;
    use crate::weights::WeightScheme;
    use approx::assert_relative_eq;
    use nalgebra::dvector;

    fn scalar_params(b: f64, lambda: f64, sigma: f64) -> FactorModelParams {
        FactorModelParams::new(
            DMatrix::from_element(1, 1, b),
            Sigma::Constant(dvector![sigma]),
            BasisSet::new(vec![DMatrix::from_element(1, 1, lambda)]).unwrap(),
            WeightScheme::homoscedastic(),
        )
        .unwrap()
    }

    #[test]
    fn standard_normal_at_zero() {
        let p = scalar_params(0.0, 1.0, 1.0);
        let v = log_density(&dvector![0.0], 0.0, &p, Family::Gaussian).unwrap();
        assert_relative_eq!(v, -0.5 * (2.0 * std::f64::consts::PI).ln(), epsilon = 1e-14);
    }

    #[test]
    fn scalar_normal_formula() {
        let p = scalar_params(0.7, 2.0, 0.3);
        let var: f64 = 0.7 * 0.7 * 2.0 + 0.3;
        let y = 1.3;
        let expect = -0.5 * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * y * y / var;
        let v = log_density(&dvector![y], 5.0, &p, Family::Gaussian).unwrap();
        assert_relative_eq!(v, expect, epsilon = 1e-13);
    }

    #[test]
    fn scalar_student_formula() {
        let p = scalar_params(0.0, 1.0, 2.0);
        let (nu, y): (f64, f64) = (5.0, 1.1);
        let expect = ln_gamma(3.0) - ln_gamma(2.5) - 0.5 * (nu * std::f64::consts::PI * 2.0).ln()
            - 3.0 * (1.0 + y * y / (2.0 * nu)).ln();
        let v = log_density(&dvector![y], 0.0, &p, Family::StudentT { nu }).unwrap();
        assert_relative_eq!(v, expect, epsilon = 1e-12);
    }

    #[test]
    fn large_nu_approaches_gaussian() {
        let b = DMatrix::from_row_slice(3, 2, &[1.0, 0.2, -0.4, 0.9, 0.3, 0.3]);
        let p = FactorModelParams::new(
            b,
            Sigma::Constant(dvector![0.5, 1.0, 1.5]),
            BasisSet::new(vec![DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0])]).unwrap(),
            WeightScheme::homoscedastic(),
        )
        .unwrap();
        let y = dvector![0.4, -1.2, 0.8];
        let g = log_density(&y, 0.0, &p, Family::Gaussian).unwrap();
        let t = log_density(&y, 0.0, &p, Family::StudentT { nu: 1e8 }).unwrap();
        assert!((g - t).abs() < 1e-4);
    }

    #[test]
    fn woodbury_matches_dense() {
        let b = DMatrix::from_row_slice(4, 2, &[1.0, 0.2, -0.4, 0.9, 0.3, 0.3, 2.0, -1.0]);
        let p = FactorModelParams::new(
            b,
            Sigma::Constant(dvector![0.5, 1.0, 1.5, 0.2]),
            BasisSet::new(vec![
                DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]),
                DMatrix::from_row_slice(2, 2, &[0.4, -0.1, -0.1, 0.8]),
            ])
            .unwrap(),
            WeightScheme::new(vec![0.0, 3.0], vec![2.0]).unwrap(),
        )
        .unwrap();
        let y = dvector![0.4, -1.2, 0.8, 2.0];
        let cov = crate::params::marginal_covariance(1.0, &p).unwrap();
        for fam in [Family::Gaussian, Family::StudentT { nu: 4.0 }] {
            let fast = log_density(&y, 1.0, &p, fam).unwrap();
            let dense = log_pdf_dense(&y, &cov, fam).unwrap();
            assert_relative_eq!(fast, dense, epsilon = 1e-11);
        }
    }

    #[test]
    fn kl_examples() {
        let z = dvector![0.0];
        let one = DMatrix::from_element(1, 1, 1.0);
        let two = DMatrix::from_element(1, 1, 2.0);
        assert_eq!(kl_gaussian(&z, &one, &z, &one).unwrap(), 0.0);
        let v = kl_gaussian(&z, &one, &z, &two).unwrap();
        assert_relative_eq!(v, 0.5 * (0.5 - 1.0 + 2f64.ln()), epsilon = 1e-15);
        assert_relative_eq!(v, 0.09657, epsilon = 1e-5);
    }
}
