//! Resolving the rotational indeterminacy of (L, B) and loading-based
//! embeddings.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::params::FactorModelParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifyConfig {
    /// Initial τ (None means K).
    pub tau0: Option<f64>,
    /// Increment of τ (None means K).
    pub tau_increment: Option<f64>,
    pub check_every: usize,
    pub step_size: f64,
    pub max_steps: usize,
    /// Stop when the relative change of the objective drops below this.
    pub tol: f64,
}

impl Default for IdentifyConfig {
    fn default() -> Self {
        Self {
            tau0: None,
            tau_increment: None,
            check_every: 10,
            step_size: 1e-2,
            max_steps: 5000,
            tol: 1e-7,
        }
    }
}

impl IdentifyConfig {
    fn validate(&self) -> Result<()> {
        let positive = |v: Option<f64>| v.is_none_or(|x| x > 0.0 && x.is_finite());
        if !(positive(self.tau0)
            && positive(self.tau_increment)
            && self.check_every > 0
            && self.step_size > 0.0
            && self.max_steps > 0
            && self.tol > 0.0)
        {
            return Err(Error::InvalidInput("identification settings must be positive".into()));
        }
        Ok(())
    }
}

/// B̃ = BVD^{-1/2} and λ̃_d = D^{1/2}Vᵀλ_dVD^{1/2} where BᵀB = VDVᵀ with
/// ascending eigenvalues.
pub fn orthonormalize(params: &FactorModelParams) -> Result<FactorModelParams> {
    let mut btb = params.b.transpose() * &params.b;
    linalg::symmetrize(&mut btb);
    let (vals, vecs) = linalg::sym_eigen_ascending(&btb);
    let top = vals.iter().copied().fold(0.0, f64::max);
    if !(vals[0] > 1e-12 * top && top > 0.0) {
        return Err(Error::Singular {
            context: "BᵀB is rank deficient; reduce K".into(),
        });
    }
    let mut c = vecs.transpose();
    for (i, mut row) in c.row_iter_mut().enumerate() {
        row *= vals[i].sqrt();
    }
    params.transformed(&c)
}

/// ℒ(A|τ) = −Σ|B̃A| + (τ/K) log|A|, or None when |A| ≤ 0.
pub fn sparsity_objective(b: &DMatrix<f64>, a: &DMatrix<f64>, tau: f64) -> Option<f64> {
    let det = a.clone().lu().determinant();
    if !(det > 0.0) {
        return None;
    }
    let l1: f64 = (b * a).iter().map(|v| v.abs()).sum();
    Some(-l1 + tau / a.nrows() as f64 * det.ln())
}

/// −B̃ᵀ sign(B̃A) + (τ/K) A⁻ᵀ with sign(0) = 0.
pub fn sparsity_gradient(b: &DMatrix<f64>, a: &DMatrix<f64>, tau: f64) -> Result<DMatrix<f64>> {
    let k = a.nrows() as f64;
    let s = (b * a).map(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 });
    let inv = a.clone().try_inverse().ok_or_else(|| Error::Singular {
        context: "rotation matrix".into(),
    })?;
    Ok(-(b.transpose() * s) + inv.transpose() * (tau / k))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsifyResult {
    pub params: FactorModelParams,
    pub a: DMatrix<f64>,
    pub tau: f64,
    pub steps: usize,
    pub objective: f64,
}

fn project(a: DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let norm = a.norm();
    a * ((k as f64).sqrt() / norm)
}

fn eigen_ratio_low(b: &DMatrix<f64>, a: &DMatrix<f64>) -> bool {
    let bh = b * a;
    let mut g = bh.transpose() * &bh;
    linalg::symmetrize(&mut g);
    let (vals, _) = linalg::sym_eigen_ascending(&g);
    vals[0] <= 0.5 * vals[vals.len() - 1]
}

/// Projected gradient ascent on ℒ(A|τ) under ‖A‖_F = √K starting from
/// A = I, then B̂ = B̃Â and λ̂_d = Â⁻¹λ̃_d Â⁻ᵀ.
pub fn sparsify(params: &FactorModelParams, config: &IdentifyConfig) -> Result<SparsifyResult> {
    config.validate()?;
    let k = params.k();
    let b = &params.b;
    let kf = k as f64;
    let mut tau = config.tau0.unwrap_or(kf);
    let inc = config.tau_increment.unwrap_or(kf);
    let mut a = DMatrix::identity(k, k);
    let mut obj = sparsity_objective(b, &a, tau).expect("identity has unit determinant");
    let mut step = config.step_size;
    let mut steps = 0;
    while steps < config.max_steps {
        steps += 1;
        if steps % config.check_every == 0 && eigen_ratio_low(b, &a) {
            tau += inc;
            obj = sparsity_objective(b, &a, tau).expect("accepted iterates have positive determinant");
        }
        let g = sparsity_gradient(b, &a, tau)?;
        let cand = project(&a + g * step, k);
        match sparsity_objective(b, &cand, tau) {
            Some(v) if v >= obj => {
                let rel = (v - obj) / obj.abs().max(f64::MIN_POSITIVE);
                a = cand;
                obj = v;
                step = (step * 1.1).min(config.step_size);
                if rel < config.tol && steps >= config.check_every {
                    break;
                }
            }
            _ => {
                step *= 0.5;
                if step < 1e-14 {
                    break;
                }
            }
        }
    }
    let a_inv = a.clone().try_inverse().ok_or_else(|| Error::Singular {
        context: "rotation matrix".into(),
    })?;
    Ok(SparsifyResult {
        params: params.transformed(&a_inv)?,
        a,
        tau,
        steps,
        objective: obj,
    })
}

/// Orthonormalization followed by the sparsity-seeking rotation.
pub fn identify(params: &FactorModelParams, config: &IdentifyConfig) -> Result<SparsifyResult> {
    sparsify(&orthonormalize(params)?, config)
}

/// Cosine of the angle between rows p and q of B.
pub fn cosine_similarity(b: &DMatrix<f64>, p: usize, q: usize) -> Result<f64> {
    if p >= b.nrows() || q >= b.nrows() {
        return Err(Error::InvalidInput("row index out of range".into()));
    }
    let (rp, rq) = (b.row(p), b.row(q));
    let (np, nq) = (rp.norm(), rq.norm());
    if np == 0.0 || nq == 0.0 {
        return Err(Error::InvalidInput("cosine similarity of a zero row is undefined".into()));
    }
    Ok((rp.dot(&rq) / (np * nq)).clamp(-1.0, 1.0))
}

/// Q×Q matrix of pairwise cosine similarities between rows of B.
pub fn similarity_matrix(b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let q = b.nrows();
    let mut out = DMatrix::zeros(q, q);
    for i in 0..q {
        for j in i..q {
            let v = cosine_similarity(b, i, j)?;
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}

/// 𝓑_t = B·chol(Λ_t), the lower Cholesky factor having a positive diagonal.
pub fn time_varying_loadings(params: &FactorModelParams, t: f64) -> Result<DMatrix<f64>> {
    let l = params.lambda_at(t)?;
    let c = l.cholesky().ok_or_else(|| Error::NotPositiveDefinite {
        context: format!("Lambda at t = {t}"),
    })?;
    Ok(&params.b * c.l())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisSet;
    use crate::params::Sigma;
    use crate::weights::WeightScheme;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, DVector};

    fn model(b: DMatrix<f64>, lambdas: Vec<DMatrix<f64>>) -> FactorModelParams {
        let q = b.nrows();
        let d = lambdas.len();
        let scheme = if d == 1 {
            WeightScheme::homoscedastic()
        } else {
            WeightScheme::new((0..d).map(|i| i as f64).collect(), vec![1.0]).unwrap()
        };
        FactorModelParams::new(
            b,
            Sigma::Constant(DVector::from_element(q, 0.5)),
            BasisSet::new(lambdas).unwrap(),
            scheme,
        )
        .unwrap()
    }

    #[test]
    fn orthogonal_columns_of_different_norms() {
        let b = dmatrix![2.0, 0.0; 0.0, 1.0; 0.0, 0.0];
        let p = model(b, vec![DMatrix::identity(2, 2)]);
        let o = orthonormalize(&p).unwrap();
        assert_relative_eq!(o.b.transpose() * &o.b, DMatrix::identity(2, 2), epsilon = 1e-12);
        // Ascending eigenvalues: the unit-norm column comes first.
        assert_relative_eq!(o.b[(1, 0)].abs(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(o.basis.lambdas[0], DMatrix::from_diagonal(&nalgebra::dvector![1.0, 4.0]), epsilon = 1e-12);
    }

    #[test]
    fn rank_deficient_loadings_are_rejected() {
        let p = model(dmatrix![1.0, 2.0; 2.0, 4.0], vec![DMatrix::identity(2, 2)]);
        assert!(orthonormalize(&p).is_err());
    }

    #[test]
    fn single_factor_rotation_is_unit() {
        let p = model(dmatrix![0.6; 0.8], vec![DMatrix::from_element(1, 1, 2.0)]);
        let r = identify(&p, &IdentifyConfig::default()).unwrap();
        assert_relative_eq!(r.a[(0, 0)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let b = dmatrix![0.6, 0.1; -0.3, 0.7; 0.2, -0.4; 0.5, 0.5];
        let a = dmatrix![0.9, 0.2; -0.1, 1.1];
        let tau = 2.5;
        let g = sparsity_gradient(&b, &a, tau).unwrap();
        let eps = 1e-7;
        for i in 0..2 {
            for j in 0..2 {
                let mut up = a.clone();
                up[(i, j)] += eps;
                let mut dn = a.clone();
                dn[(i, j)] -= eps;
                let fd = (sparsity_objective(&b, &up, tau).unwrap()
                    - sparsity_objective(&b, &dn, tau).unwrap())
                    / (2.0 * eps);
                assert!((fd - g[(i, j)]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn rotated_sparse_target_is_recovered() {
        // Sparse orthonormal target rotated by 0.4 rad.
        let target = dmatrix![1.0, 0.0; 1.0, 0.0; 0.0, 1.0; 0.0, 1.0] / 2f64.sqrt();
        let (c, s) = (0.4f64.cos(), 0.4f64.sin());
        let rot = dmatrix![c, -s; s, c];
        let p = model(&target * &rot, vec![DMatrix::identity(2, 2)]);
        let r = sparsify(&p, &IdentifyConfig::default()).unwrap();
        let l1: f64 = r.params.b.iter().map(|v| v.abs()).sum();
        let target_l1: f64 = target.iter().map(|v| v.abs()).sum();
        assert!((l1 - target_l1).abs() < 1e-3);
        assert!(r.a.clone().lu().determinant().ln() <= 1e-12);
        assert_relative_eq!(r.a.norm(), 2f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn cosine_examples() {
        let b = dmatrix![1.0, 0.0; 1.0, 1.0; 0.0, 2.0; 0.0, 0.0];
        assert_relative_eq!(cosine_similarity(&b, 0, 1).unwrap(), 0.5f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(cosine_similarity(&b, 0, 0).unwrap(), 1.0, epsilon = 1e-15);
        assert_eq!(cosine_similarity(&b, 0, 2).unwrap(), 0.0);
        assert!(cosine_similarity(&b, 0, 3).is_err());
    }

    #[test]
    fn loadings_reconstruct_the_factor_covariance() {
        let b = dmatrix![1.0, 0.2; -0.5, 0.7; 0.3, 0.3];
        let l1 = dmatrix![2.0, 0.5; 0.5, 1.0];
        let l2 = dmatrix![1.0, -0.2; -0.2, 3.0];
        let p = model(b.clone(), vec![l1, l2]);
        let bt = time_varying_loadings(&p, 0.3).unwrap();
        let l = p.lambda_at(0.3).unwrap();
        assert_relative_eq!(&bt * bt.transpose(), &b * l * b.transpose(), epsilon = 1e-10);
        let scaled = model(b.clone(), vec![DMatrix::identity(2, 2) * 4.0]);
        assert_relative_eq!(time_varying_loadings(&scaled, 0.0).unwrap(), b * 2.0, epsilon = 1e-12);
    }
}
