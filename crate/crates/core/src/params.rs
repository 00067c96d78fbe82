//! Factor model parameters and derived covariances.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{self, BasisSet};
use crate::error::{Error, Result};
use crate::weights::WeightScheme;

/// Per-coordinate basis scalars ν_{qd} and their weight schemes ω̃_q.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TvSigma {
    pub scalars: Vec<DVector<f64>>,
    pub schemes: Vec<WeightScheme>,
}

impl TvSigma {
    /// Every coordinate uses the same scheme; all scalars start at `value`.
    pub fn shared(q: usize, scheme: &WeightScheme, value: f64) -> Self {
        Self {
            scalars: vec![DVector::from_element(scheme.n_bases(), value); q],
            schemes: vec![scheme.clone(); q],
        }
    }

    pub fn sigma_at(&self, t: f64, q: usize) -> Result<f64> {
        let w = self.schemes[q].eval(t)?;
        let mut prec = 0.0;
        for (d, v) in self.scalars[q].iter().enumerate() {
            if !(*v > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "basis scalar {d} of coordinate {q} is not positive"
                )));
            }
            prec += w[d] / v;
        }
        Ok(1.0 / prec)
    }
}

/// Idiosyncratic variances: constant or built from basis scalars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Sigma {
    Constant(DVector<f64>),
    TimeVarying(TvSigma),
}

impl Sigma {
    pub fn len(&self) -> usize {
        match self {
            Sigma::Constant(s) => s.len(),
            Sigma::TimeVarying(tv) => tv.scalars.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn at(&self, t: f64) -> Result<DVector<f64>> {
        match self {
            Sigma::Constant(s) => Ok(s.clone()),
            Sigma::TimeVarying(tv) => {
                let q = tv.scalars.len();
                let mut out = DVector::zeros(q);
                for i in 0..q {
                    out[i] = tv.sigma_at(t, i)?;
                }
                Ok(out)
            }
        }
    }

    pub fn constant(&self) -> Option<&DVector<f64>> {
        match self {
            Sigma::Constant(s) => Some(s),
            Sigma::TimeVarying(_) => None,
        }
    }
}

/// Ω = (L, B, Σ) together with the weight scheme ω.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorModelParams {
    pub b: DMatrix<f64>,
    pub sigma: Sigma,
    pub basis: BasisSet,
    pub weights: WeightScheme,
}

impl FactorModelParams {
    pub fn new(
        b: DMatrix<f64>,
        sigma: Sigma,
        basis: BasisSet,
        weights: WeightScheme,
    ) -> Result<Self> {
        let p = Self {
            b,
            sigma,
            basis,
            weights,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.b.ncols() != self.basis.dim() {
            return Err(Error::DimensionMismatch(format!(
                "B has {} columns but bases are {}x{}",
                self.b.ncols(),
                self.basis.dim(),
                self.basis.dim()
            )));
        }
        if self.sigma.len() != self.b.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "B has {} rows but Sigma has {} entries",
                self.b.nrows(),
                self.sigma.len()
            )));
        }
        basis::check_counts(&self.basis, &self.weights)?;
        match &self.sigma {
            Sigma::Constant(s) => {
                if s.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                    return Err(Error::InvalidInput("Sigma entries must be positive".into()));
                }
            }
            Sigma::TimeVarying(tv) => {
                if tv.schemes.len() != tv.scalars.len() {
                    return Err(Error::DimensionMismatch(
                        "one weight scheme per coordinate is required".into(),
                    ));
                }
                for (q, (s, w)) in tv.scalars.iter().zip(&tv.schemes).enumerate() {
                    if s.len() != w.n_bases() {
                        return Err(Error::DimensionMismatch(format!(
                            "coordinate {q} has {} scalars but {} centers",
                            s.len(),
                            w.n_bases()
                        )));
                    }
                    if s.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                        return Err(Error::InvalidInput(format!(
                            "basis scalars of coordinate {q} must be positive"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn q(&self) -> usize {
        self.b.nrows()
    }

    pub fn k(&self) -> usize {
        self.b.ncols()
    }

    pub fn lambda_at(&self, t: f64) -> Result<DMatrix<f64>> {
        basis::lambda_at(t, &self.basis, &self.weights)
    }

    /// Applies the transformation (L, B) → (C L Cᵀ, B C⁻¹).
    pub fn transformed(&self, c: &DMatrix<f64>) -> Result<Self> {
        let c_inv = c.clone().try_inverse().ok_or_else(|| Error::Singular {
            context: "transformation matrix".into(),
        })?;
        Ok(Self {
            b: &self.b * c_inv,
            sigma: self.sigma.clone(),
            basis: self.basis.transformed(c),
            weights: self.weights.clone(),
        })
    }
}

/// Σ_{tq} for the time-varying variant (the constant value otherwise).
pub fn sigma_at(t: f64, params: &FactorModelParams, q: usize) -> Result<f64> {
    match &params.sigma {
        Sigma::Constant(s) => Ok(s[q]),
        Sigma::TimeVarying(tv) => tv.sigma_at(t, q),
    }
}

/// B Λ_t Bᵀ + Σ_t.
pub fn marginal_covariance(t: f64, params: &FactorModelParams) -> Result<DMatrix<f64>> {
    let lambda = params.lambda_at(t)?;
    let mut m = &params.b * lambda * params.b.transpose();
    let s = params.sigma.at(t)?;
    for q in 0..s.len() {
        m[(q, q)] += s[q];
    }
    crate::linalg::symmetrize(&mut m);
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum RegularizationMode {
    #[default]
    Free,
    Diagonal,
    InverseWishart,
}

/// Regularization of the basis update. `zeta = None` means the diffuse
/// default ζ+K+1 = 1e-8; `theta = None` means Θ = 1e-8·I.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RegularizationConfig {
    pub mode: RegularizationMode,
    pub zeta: Option<f64>,
    pub theta: Option<DMatrix<f64>>,
}

impl RegularizationConfig {
    pub fn diagonal() -> Self {
        Self {
            mode: RegularizationMode::Diagonal,
            ..Self::default()
        }
    }

    pub fn inverse_wishart(zeta: Option<f64>, theta: Option<DMatrix<f64>>) -> Self {
        Self {
            mode: RegularizationMode::InverseWishart,
            zeta,
            theta,
        }
    }

    /// ζ + K + 1.
    pub fn iw_dof(&self, k: usize) -> f64 {
        self.zeta.map(|z| z + k as f64 + 1.0).unwrap_or(1e-8)
    }

    pub fn iw_theta(&self, k: usize) -> DMatrix<f64> {
        self.theta
            .clone()
            .unwrap_or_else(|| DMatrix::identity(k, k) * 1e-8)
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if self.mode == RegularizationMode::InverseWishart {
            if !(self.iw_dof(k) > 0.0) {
                return Err(Error::InvalidInput("zeta + K + 1 must be positive".into()));
            }
            let theta = self.iw_theta(k);
            if theta.nrows() != k || theta.ncols() != k {
                return Err(Error::DimensionMismatch(format!("Theta must be {k}x{k}")));
            }
            crate::linalg::cholesky(&theta, "Theta")?;
        }
        Ok(())
    }
}
