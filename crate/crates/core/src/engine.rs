//! Shared E-step, objective and M-step machinery for the vector factor
//! models (Gaussian and Student-t, constant or time-varying Σ).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::basis::{BasisInverses, BasisSet};
use crate::density::{log_pdf_from_parts, Family};
use crate::error::{Error, Result};
use crate::linalg;
use crate::params::{FactorModelParams, RegularizationConfig, RegularizationMode, Sigma, TvSigma};
use crate::weights::WeightScheme;

/// Lower bound applied to updated idiosyncratic variances.
pub const SIGMA_FLOOR: f64 = 1e-10;

/// Weight matrices for one set of time points.
#[derive(Debug, Clone)]
pub(crate) struct Design {
    pub w: DMatrix<f64>,
    pub col_sums: Vec<f64>,
    pub noise: Option<NoiseDesign>,
}

/// Weight matrices of the per-coordinate schemes, deduplicated.
#[derive(Debug, Clone)]
pub(crate) struct NoiseDesign {
    pub mats: Vec<DMatrix<f64>>,
    pub col_sums: Vec<Vec<f64>>,
    pub group_of: Vec<usize>,
}

fn col_sums(w: &DMatrix<f64>) -> Vec<f64> {
    w.column_iter().map(|c| c.sum()).collect()
}

impl Design {
    pub fn new(times: &[f64], params: &FactorModelParams) -> Result<Self> {
        let w = params.weights.matrix(times)?;
        let noise = match &params.sigma {
            Sigma::Constant(_) => None,
            Sigma::TimeVarying(tv) => Some(NoiseDesign::new(times, &tv.schemes)?),
        };
        Ok(Self {
            col_sums: col_sums(&w),
            w,
            noise,
        })
    }

    pub fn with_scheme(times: &[f64], scheme: &WeightScheme, noise: Option<NoiseDesign>) -> Result<Self> {
        let w = scheme.matrix(times)?;
        Ok(Self {
            col_sums: col_sums(&w),
            w,
            noise,
        })
    }
}

impl NoiseDesign {
    pub fn new(times: &[f64], schemes: &[WeightScheme]) -> Result<Self> {
        let mut uniq: Vec<&WeightScheme> = Vec::new();
        let mut group_of = Vec::with_capacity(schemes.len());
        for s in schemes {
            match uniq.iter().position(|u| *u == s) {
                Some(i) => group_of.push(i),
                None => {
                    group_of.push(uniq.len());
                    uniq.push(s);
                }
            }
        }
        let mats = uniq
            .iter()
            .map(|s| s.matrix(times))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            col_sums: mats.iter().map(col_sums).collect(),
            mats,
            group_of,
        })
    }

    pub fn matrix(&self, q: usize) -> &DMatrix<f64> {
        &self.mats[self.group_of[q]]
    }

    pub fn sums(&self, q: usize) -> &[f64] {
        &self.col_sums[self.group_of[q]]
    }
}

/// Σ⁻¹ either constant (length Q) or per time point (Q×N).
#[derive(Debug, Clone)]
pub(crate) enum NoisePrecision {
    Constant(DVector<f64>),
    PerPoint(DMatrix<f64>),
}

impl NoisePrecision {
    pub fn new(sigma: &Sigma, design: &Design, n: usize) -> Result<Self> {
        match sigma {
            Sigma::Constant(s) => Ok(NoisePrecision::Constant(s.map(|v| 1.0 / v))),
            Sigma::TimeVarying(tv) => {
                let nd = design
                    .noise
                    .as_ref()
                    .ok_or_else(|| Error::InvalidInput("missing noise design".into()))?;
                let q = tv.scalars.len();
                let mut prec = DMatrix::zeros(q, n);
                for i in 0..q {
                    let inv = tv.scalars[i].map(|v| 1.0 / v);
                    let col = nd.matrix(i) * inv;
                    for j in 0..n {
                        prec[(i, j)] = col[j];
                    }
                }
                Ok(NoisePrecision::PerPoint(prec))
            }
        }
    }

    pub fn column(&self, n: usize) -> DVector<f64> {
        match self {
            NoisePrecision::Constant(s) => s.clone(),
            NoisePrecision::PerPoint(m) => m.column(n).into_owned(),
        }
    }
}

/// Factor posterior per observation plus the pieces of the marginal
/// log-density obtained along the way.
#[derive(Debug, Clone)]
pub(crate) struct Posterior {
    pub eta: Vec<DVector<f64>>,
    pub psi: Vec<DMatrix<f64>>,
    /// log|BΛ_tBᵀ+Σ_t|
    pub log_det_cov: Vec<f64>,
    /// yᵀ(BΛ_tBᵀ+Σ_t)⁻¹y
    pub quad: Vec<f64>,
    /// log|Λ_t⁻¹|
    pub log_det_prec: Vec<f64>,
}

struct PointResult {
    eta: DVector<f64>,
    psi: DMatrix<f64>,
    log_det_cov: f64,
    quad: f64,
    log_det_prec: f64,
}

fn scale_rows(b: &DMatrix<f64>, s: &DVector<f64>) -> DMatrix<f64> {
    let mut out = b.clone();
    for (q, mut row) in out.row_iter_mut().enumerate() {
        row *= s[q];
    }
    out
}

/// Posterior moments given the accumulated prior precisions (K²×N).
pub(crate) fn posterior_from_precisions(
    y: &DMatrix<f64>,
    b: &DMatrix<f64>,
    prec: &DMatrix<f64>,
    noise: &NoisePrecision,
) -> Result<Posterior> {
    let n_obs = y.nrows();
    let k = b.ncols();
    let shared = match noise {
        NoisePrecision::Constant(s) => {
            let bs = scale_rows(b, s);
            let g = b.transpose() * &bs;
            let h = bs.transpose() * y.transpose();
            let ld_sigma: f64 = -s.iter().map(|v| v.ln()).sum::<f64>();
            Some((g, h, ld_sigma))
        }
        NoisePrecision::PerPoint(_) => None,
    };
    let results: Vec<Result<PointResult>> = (0..n_obs)
        .into_par_iter()
        .map(|n| {
            let yn = y.row(n).transpose();
            let s = noise.column(n);
            let (g, h, ld_sigma) = match &shared {
                Some((g, h, ld)) => (g.clone(), h.column(n).into_owned(), *ld),
                None => {
                    let bs = scale_rows(b, &s);
                    (
                        b.transpose() * &bs,
                        bs.transpose() * &yn,
                        -s.iter().map(|v| v.ln()).sum::<f64>(),
                    )
                }
            };
            let p = BasisInverses::column(prec, n, k);
            let cp = linalg::cholesky(&p, &format!("accumulated precision at point {n}"))?;
            let ld_p = linalg::log_det_chol(&cp);
            let a = p + g;
            let ca = linalg::cholesky(&a, &format!("posterior precision at point {n}"))?;
            let ld_a = linalg::log_det_chol(&ca);
            let mut psi = ca.inverse();
            linalg::symmetrize(&mut psi);
            let eta = &psi * &h;
            let yy: f64 = yn.iter().zip(s.iter()).map(|(v, p)| v * v * p).sum();
            let quad = (yy - h.dot(&eta)).max(0.0);
            Ok(PointResult {
                eta,
                psi,
                log_det_cov: ld_sigma - ld_p + ld_a,
                quad,
                log_det_prec: ld_p,
            })
        })
        .collect();
    let mut post = Posterior {
        eta: Vec::with_capacity(n_obs),
        psi: Vec::with_capacity(n_obs),
        log_det_cov: Vec::with_capacity(n_obs),
        quad: Vec::with_capacity(n_obs),
        log_det_prec: Vec::with_capacity(n_obs),
    };
    for r in results {
        let r = r?;
        post.eta.push(r.eta);
        post.psi.push(r.psi);
        post.log_det_cov.push(r.log_det_cov);
        post.quad.push(r.quad);
        post.log_det_prec.push(r.log_det_prec);
    }
    Ok(post)
}

/// Everything evaluated at one parameter value.
pub(crate) struct Evaluation {
    pub post: Posterior,
    pub noise: NoisePrecision,
    pub log_lik: f64,
    pub log_prior: f64,
}

impl Evaluation {
    pub fn objective(&self) -> f64 {
        self.log_lik + self.log_prior
    }
}

pub(crate) fn evaluate(
    y: &DMatrix<f64>,
    params: &FactorModelParams,
    design: &Design,
    family: Family,
    reg: &RegularizationConfig,
) -> Result<Evaluation> {
    let inv = params.basis.inverses()?;
    let noise = NoisePrecision::new(&params.sigma, design, y.nrows())?;
    let prec = inv.precisions(&design.w);
    let post = posterior_from_precisions(y, &params.b, &prec, &noise)?;
    let q = y.ncols();
    let log_lik: f64 = post
        .log_det_cov
        .iter()
        .zip(&post.quad)
        .map(|(ld, qf)| log_pdf_from_parts(family, q, *ld, *qf))
        .sum();
    let mut log_prior = basis_prior(design, &inv, &post.log_det_prec);
    if reg.mode == RegularizationMode::InverseWishart {
        log_prior += iw_log_prior(&inv, reg);
    }
    if let (Sigma::TimeVarying(tv), Some(nd)) = (&params.sigma, &design.noise) {
        for (i, vals) in tv.scalars.iter().enumerate() {
            log_prior += crate::basis::log_prior_scalars(vals.as_slice(), nd.matrix(i))?;
        }
    }
    if !(log_lik.is_finite() && log_prior.is_finite()) {
        return Err(Error::NonFinite {
            context: "log joint posterior".into(),
        });
    }
    Ok(Evaluation {
        post,
        noise,
        log_lik,
        log_prior,
    })
}

/// Basis prior from the accumulated-precision log-determinants.
pub(crate) fn basis_prior(design: &Design, inv: &BasisInverses, log_det_prec: &[f64]) -> f64 {
    let weighted: f64 = design
        .col_sums
        .iter()
        .zip(&inv.log_det)
        .map(|(c, ld)| c * ld)
        .sum();
    -0.5 * weighted - 0.5 * log_det_prec.iter().sum::<f64>()
}

/// Σ_d log IW(λ_d | Θ, ζ) up to its normalizing constant.
pub(crate) fn iw_log_prior(inv: &BasisInverses, reg: &RegularizationConfig) -> f64 {
    let k = inv.k;
    let dof = reg.iw_dof(k);
    let theta = reg.iw_theta(k);
    inv.inv
        .iter()
        .zip(&inv.log_det)
        .map(|(li, ld)| -0.5 * dof * ld - 0.5 * (&theta * li).trace())
        .sum()
}

/// K²×N matrix with column n = vec(ξ_n² η̂_nη̂_nᵀ + Ψ̂_n).
pub(crate) fn second_moments(
    eta: &[DVector<f64>],
    psi: &[DMatrix<f64>],
    xi2: Option<&[f64]>,
) -> DMatrix<f64> {
    let k = eta.first().map(|e| e.len()).unwrap_or(0);
    let mut out = DMatrix::zeros(k * k, eta.len());
    for n in 0..eta.len() {
        let scale = xi2.map(|x| x[n]).unwrap_or(1.0);
        let mut col = out.column_mut(n);
        for j in 0..k {
            for i in 0..k {
                col[i + j * k] = scale * eta[n][i] * eta[n][j] + psi[n][(i, j)];
            }
        }
    }
    out
}

fn reshape(col: nalgebra::DVectorView<'_, f64>, k: usize) -> DMatrix<f64> {
    let mut m = DMatrix::from_column_slice(k, k, col.as_slice());
    linalg::symmetrize(&mut m);
    m
}

/// Basis update: weighted averages of the second moments (free,
/// diagonal or inverse-Wishart MAP).
pub(crate) fn update_basis(
    moments: &DMatrix<f64>,
    w: &DMatrix<f64>,
    col_sums: &[f64],
    reg: &RegularizationConfig,
    k: usize,
) -> Result<BasisSet> {
    let num = moments * w;
    let theta = reg.iw_theta(k);
    let dof = reg.iw_dof(k);
    let mut lambdas = Vec::with_capacity(w.ncols());
    for d in 0..w.ncols() {
        let s = reshape(num.column(d), k);
        let lambda = match reg.mode {
            RegularizationMode::Free | RegularizationMode::Diagonal => {
                if !(col_sums[d] > 0.0) {
                    return Err(Error::ZeroBasisWeight { basis: d });
                }
                let mut l = s / col_sums[d];
                if reg.mode == RegularizationMode::Diagonal {
                    l = DMatrix::from_diagonal(&l.diagonal());
                }
                l
            }
            RegularizationMode::InverseWishart => (&theta + s) / (dof + col_sums[d]),
        };
        lambdas.push(lambda);
    }
    Ok(BasisSet { lambdas })
}

/// N×K matrix of posterior means with row n scaled by `scale[n]`.
fn eta_matrix(eta: &[DVector<f64>], scale: Option<&[f64]>) -> DMatrix<f64> {
    let k = eta.first().map(|e| e.len()).unwrap_or(0);
    DMatrix::from_fn(eta.len(), k, |n, j| {
        eta[n][j] * scale.map(|x| x[n]).unwrap_or(1.0)
    })
}

fn summed_moments(moments: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let total: DVector<f64> = moments.column_sum();
    reshape(total.column(0), k)
}

/// Joint B and constant-Σ update.
pub(crate) fn update_b_sigma(
    y: &DMatrix<f64>,
    eta: &[DVector<f64>],
    moments: &DMatrix<f64>,
    xi2: Option<&[f64]>,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = y.nrows() as f64;
    let k = eta[0].len();
    let e = eta_matrix(eta, xi2);
    let num = y.transpose() * &e;
    let s = summed_moments(moments, k);
    let b = linalg::solve_right_spd(&num, &s, "sum of factor second moments")?;
    let mut sigma = DVector::zeros(y.ncols());
    for q in 0..y.ncols() {
        let yy: f64 = (0..y.nrows())
            .map(|i| xi2.map(|x| x[i]).unwrap_or(1.0) * y[(i, q)] * y[(i, q)])
            .sum();
        let bq = b.row(q);
        let cross = bq.dot(&num.row(q));
        let quad = (bq * &s).dot(&bq);
        sigma[q] = ((yy - 2.0 * cross + quad) / n).max(SIGMA_FLOOR);
    }
    Ok((b, sigma))
}

/// Conditional B update under time-varying Σ (old Σ weights each row's
/// normal equations).
pub(crate) fn update_b_tv(
    y: &DMatrix<f64>,
    eta: &[DVector<f64>],
    moments: &DMatrix<f64>,
    xi2: Option<&[f64]>,
    old_prec: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let k = eta[0].len();
    let (n_obs, q) = (y.nrows(), y.ncols());
    let per_q = moments * old_prec.transpose();
    let z = DMatrix::from_fn(n_obs, q, |i, j| {
        xi2.map(|x| x[i]).unwrap_or(1.0) * old_prec[(j, i)] * y[(i, j)]
    });
    let num = eta_matrix(eta, None).transpose() * z;
    let mut b = DMatrix::zeros(q, k);
    for j in 0..q {
        let s = reshape(per_q.column(j), k);
        let c = linalg::cholesky(&s, &format!("weighted normal equations of row {j}"))?;
        let row = c.solve(&num.column(j).into_owned());
        b.row_mut(j).copy_from(&row.transpose());
    }
    Ok(b)
}

/// N×Q matrix of ξ²(y_nq − B_qη̂_n)² + B_qΨ̂_nB_qᵀ.
pub(crate) fn residual_moments(
    y: &DMatrix<f64>,
    b: &DMatrix<f64>,
    eta: &[DVector<f64>],
    psi: &[DMatrix<f64>],
    xi2: Option<&[f64]>,
) -> DMatrix<f64> {
    let (n_obs, q) = (y.nrows(), y.ncols());
    let mut r = DMatrix::zeros(n_obs, q);
    for n in 0..n_obs {
        let fit = b * &eta[n];
        let bp = b * &psi[n];
        let scale = xi2.map(|x| x[n]).unwrap_or(1.0);
        for j in 0..q {
            let e = y[(n, j)] - fit[j];
            r[(n, j)] = scale * e * e + bp.row(j).dot(&b.row(j));
        }
    }
    r
}

/// Conditional update of the basis scalars given the new B.
pub(crate) fn update_tv_scalars(
    resid: &DMatrix<f64>,
    nd: &NoiseDesign,
    old: &TvSigma,
) -> Result<TvSigma> {
    let q = resid.ncols();
    let mut scalars = Vec::with_capacity(q);
    for j in 0..q {
        let w = nd.matrix(j);
        let sums = nd.sums(j);
        let num = w.transpose() * resid.column(j);
        let mut v = DVector::zeros(num.len());
        for d in 0..num.len() {
            if !(sums[d] > 0.0) {
                return Err(Error::ZeroBasisWeight { basis: d });
            }
            v[d] = (num[d] / sums[d]).max(SIGMA_FLOOR);
        }
        scalars.push(v);
    }
    Ok(TvSigma {
        scalars,
        schemes: old.schemes.clone(),
    })
}

/// ξ̂² = (ν+Q)/(ν + quadratic form).
pub(crate) fn latent_scales(quad: &[f64], nu: f64, q: usize) -> Vec<f64> {
    quad.iter().map(|v| (nu + q as f64) / (nu + v)).collect()
}

/// One M-step (or conditional M-step sweep) of the vector factor model.
#[allow(clippy::too_many_arguments)]
pub(crate) fn m_step(
    y: &DMatrix<f64>,
    params: &FactorModelParams,
    design: &Design,
    eval_noise: &NoisePrecision,
    eta: &[DVector<f64>],
    psi: &[DMatrix<f64>],
    xi2: Option<&[f64]>,
    reg: &RegularizationConfig,
) -> Result<FactorModelParams> {
    let k = params.k();
    let moments = second_moments(eta, psi, xi2);
    let basis = update_basis(&moments, &design.w, &design.col_sums, reg, k)?;
    let (b, sigma) = match &params.sigma {
        Sigma::Constant(_) => {
            let (b, s) = update_b_sigma(y, eta, &moments, xi2)?;
            (b, Sigma::Constant(s))
        }
        Sigma::TimeVarying(tv) => {
            let old_prec = match eval_noise {
                NoisePrecision::PerPoint(m) => m.clone(),
                NoisePrecision::Constant(s) => {
                    DMatrix::from_fn(s.len(), y.nrows(), |j, _| s[j])
                }
            };
            let b = update_b_tv(y, eta, &moments, xi2, &old_prec)?;
            let resid = residual_moments(y, &b, eta, psi, xi2);
            let nd = design
                .noise
                .as_ref()
                .ok_or_else(|| Error::InvalidInput("missing noise design".into()))?;
            (b, Sigma::TimeVarying(update_tv_scalars(&resid, nd, tv)?))
        }
    };
    Ok(FactorModelParams {
        b,
        sigma,
        basis,
        weights: params.weights.clone(),
    })
}
