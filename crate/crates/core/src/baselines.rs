//! Comparison estimators: EWMA on PCA factor scores, the non-factor MAP
//! estimator and the Nadaraya–Watson moving average.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{self, BasisSet};
use crate::density::{log_pdf_dense, log_pdf_from_parts, woodbury_parts, Family};
use crate::engine::SIGMA_FLOOR;
use crate::error::{Error, Result};
use crate::linalg;
use crate::weights::{Observations, TimePoints, WeightScheme};

/// PCA factors with an exponentially weighted factor covariance.
/// Positions are the observation indices 1..N.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EwmaModel {
    /// Q×K orthonormal loadings.
    pub w_k: DMatrix<f64>,
    pub alpha: f64,
    /// N×K factor scores.
    pub z: DMatrix<f64>,
    pub sigma: DVector<f64>,
}

/// α^{|d|} with 0⁰ = 1.
fn decay(alpha: f64, d: f64) -> f64 {
    if d == 0.0 {
        1.0
    } else {
        alpha.powf(d)
    }
}

/// Top-K right singular vectors of the N×Q data matrix.
pub fn pca_loadings(y: &DMatrix<f64>, k: usize) -> Result<DMatrix<f64>> {
    let (n, q) = y.shape();
    if k == 0 || k > n.min(q) {
        return Err(Error::InvalidInput(format!(
            "K = {k} must lie in 1..={}",
            n.min(q)
        )));
    }
    let svd = y.clone().svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::Singular {
        context: "singular value decomposition".into(),
    })?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    Ok(DMatrix::from_fn(q, k, |i, j| v_t[(order[j], i)]))
}

pub fn ewma_fit(obs: &Observations, k: usize, alpha: f64) -> Result<EwmaModel> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidInput("alpha must lie in [0, 1]".into()));
    }
    let y = obs.y();
    let w_k = pca_loadings(y, k)?;
    let z = y * &w_k;
    let resid = y - &z * w_k.transpose();
    let n = y.nrows() as f64;
    let sigma = DVector::from_fn(y.ncols(), |q, _| {
        (resid.column(q).norm_squared() / n).max(SIGMA_FLOOR)
    });
    Ok(EwmaModel {
        w_k,
        alpha,
        z,
        sigma,
    })
}

impl EwmaModel {
    pub fn n(&self) -> usize {
        self.z.nrows()
    }

    pub fn k(&self) -> usize {
        self.z.ncols()
    }

    /// Λ at a (possibly fractional or out-of-sample) position, optionally
    /// leaving one observation out.
    fn lambda_excluding(&self, pos: f64, skip: Option<usize>) -> Result<DMatrix<f64>> {
        let k = self.k();
        let mut m = DMatrix::zeros(k, k);
        let mut total = 0.0;
        for s in 0..self.n() {
            if Some(s) == skip {
                continue;
            }
            let w = decay(self.alpha, (pos - (s + 1) as f64).abs());
            if w == 0.0 {
                continue;
            }
            let zs = self.z.row(s).transpose();
            m.ger(w, &zs, &zs, 1.0);
            total += w;
        }
        if !(total > 0.0) {
            return Err(Error::DegenerateWeights { t: pos });
        }
        Ok(m / total)
    }

    /// Λ at position `pos` (observations sit at 1..N).
    pub fn lambda_at(&self, pos: f64) -> Result<DMatrix<f64>> {
        self.lambda_excluding(pos, None)
    }

    pub fn covariance_at(&self, pos: f64) -> Result<DMatrix<f64>> {
        let mut c = &self.w_k * self.lambda_at(pos)? * self.w_k.transpose();
        for i in 0..c.nrows() {
            c[(i, i)] += self.sigma[i];
        }
        linalg::symmetrize(&mut c);
        Ok(c)
    }

    /// Gaussian log-density of `y` at position `pos`.
    pub fn log_density(&self, y: &DVector<f64>, pos: f64) -> Result<f64> {
        let lambda = self.lambda_at(pos)?;
        let (ld, quad) = woodbury_parts(y, &self.w_k, &lambda, &self.sigma)?;
        Ok(log_pdf_from_parts(Family::Gaussian, y.len(), ld, quad))
    }

    /// Σₙ log-density of y_n under Λ built without observation n.
    pub fn loo_score(&self, obs: &Observations) -> Result<f64> {
        let parts: Vec<Result<f64>> = (0..self.n())
            .into_par_iter()
            .map(|n| {
                let lambda = self.lambda_excluding((n + 1) as f64, Some(n))?;
                let (ld, quad) = woodbury_parts(&obs.row(n), &self.w_k, &lambda, &self.sigma)?;
                Ok(log_pdf_from_parts(Family::Gaussian, obs.q(), ld, quad))
            })
            .collect();
        parts.into_iter().sum()
    }
}

/// The grid {1.000, 0.999, …, 0.950}.
pub fn default_alpha_grid() -> Vec<f64> {
    (0..=50).map(|i| 1.0 - i as f64 * 1e-3).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EwmaSelection {
    pub model: EwmaModel,
    /// (K, α, leave-one-out score) for every candidate pair.
    pub scores: Vec<(usize, f64, f64)>,
}

/// Leave-one-out choice of (K, α); ties go to the earlier candidate.
pub fn ewma_select(obs: &Observations, ks: &[usize], alphas: &[f64]) -> Result<EwmaSelection> {
    if ks.is_empty() || alphas.is_empty() {
        return Err(Error::InvalidInput("EWMA candidates must be non-empty".into()));
    }
    let mut scores = Vec::new();
    let mut best: Option<(usize, f64, f64)> = None;
    for &k in ks {
        let base = ewma_fit(obs, k, 1.0)?;
        for &alpha in alphas {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(Error::InvalidInput("alpha must lie in [0, 1]".into()));
            }
            let m = EwmaModel { alpha, ..base.clone() };
            let s = match m.loo_score(obs) {
                Ok(s) => s,
                Err(e) if e.is_numeric() => f64::NEG_INFINITY,
                Err(e) => return Err(e),
            };
            scores.push((k, alpha, s));
            if best.is_none_or(|(_, _, b)| s > b) {
                best = Some((k, alpha, s));
            }
        }
    }
    let (k, alpha, _) = best.expect("candidates are non-empty");
    Ok(EwmaSelection {
        model: ewma_fit(obs, k, alpha)?,
        scores,
    })
}

/// Direct Q×Q model y_t ~ 𝒩(0, Λ_t) with MAP bases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonFactorModel {
    pub basis: BasisSet,
    pub weights: WeightScheme,
}

/// λ̂_d = Σₙ ω_d(t_n) y_ny_nᵀ / Σₙ ω_d(t_n).
pub fn nonfactor_map(obs: &Observations, times: &TimePoints, scheme: &WeightScheme) -> Result<NonFactorModel> {
    obs.check_times(times)?;
    let y = obs.y();
    let w = scheme.matrix(times.as_slice())?;
    let mut lambdas = Vec::with_capacity(w.ncols());
    for d in 0..w.ncols() {
        let col = w.column(d);
        let total = col.sum();
        if !(total > 0.0) {
            return Err(Error::ZeroBasisWeight { basis: d });
        }
        let mut weighted = y.clone();
        for (n, mut row) in weighted.row_iter_mut().enumerate() {
            row *= col[n];
        }
        let mut l = y.transpose() * weighted / total;
        linalg::symmetrize(&mut l);
        lambdas.push(l);
    }
    Ok(NonFactorModel {
        basis: BasisSet { lambdas },
        weights: scheme.clone(),
    })
}

impl NonFactorModel {
    pub fn lambda_at(&self, t: f64) -> Result<DMatrix<f64>> {
        basis::lambda_at(t, &self.basis, &self.weights)
    }

    pub fn log_density(&self, y: &DVector<f64>, t: f64) -> Result<f64> {
        log_pdf_dense(y, &self.lambda_at(t)?, Family::Gaussian)
    }
}

/// Exponentially weighted average of observed factor outer products.
#[derive(Debug, Clone, PartialEq)]
pub struct NadarayaWatson {
    factors: DMatrix<f64>,
    times: Vec<f64>,
    gamma: f64,
}

pub fn nadaraya_watson_cov(factors: &DMatrix<f64>, times: &TimePoints, gamma: f64) -> Result<NadarayaWatson> {
    if factors.nrows() != times.len() {
        return Err(Error::DimensionMismatch("one factor row per time point".into()));
    }
    if !(gamma >= 0.0) {
        return Err(Error::InvalidInput("gamma must be non-negative".into()));
    }
    Ok(NadarayaWatson {
        factors: factors.clone(),
        times: times.as_slice().to_vec(),
        gamma,
    })
}

impl NadarayaWatson {
    /// Λ̂_t with weights exp(−γ|t−t_n|), shifted by the nearest distance.
    pub fn at(&self, t: f64) -> DMatrix<f64> {
        let k = self.factors.ncols();
        let dist: Vec<f64> = self.times.iter().map(|s| (t - s).abs()).collect();
        let nearest = dist.iter().copied().fold(f64::INFINITY, f64::min);
        let mut m = DMatrix::zeros(k, k);
        let mut total = 0.0;
        for (n, d) in dist.iter().enumerate() {
            let w = if self.gamma == 0.0 {
                1.0
            } else {
                (-self.gamma * (d - nearest)).exp()
            };
            if w == 0.0 {
                continue;
            }
            let f = self.factors.row(n).transpose();
            m.ger(w, &f, &f, 1.0);
            total += w;
        }
        m / total
    }
}
