//! Matrix-variate (spatiotemporal) factor models fitted by ECM.
//!
//! Observations are Q×P matrices y_n with
//! vec(y_n) ~ 𝒩(0, (C⊗B) Λ̄_t (C⊗B)ᵀ + Φ⊗Σ), where Λ̄_t is either a single
//! harmonic-average covariance of dimension K_P·K_Q (variant A) or
//! Γ_t ⊗ Λ_t (variant B). Factor matrices are K_Q×K_P and vec stacks
//! columns, so block (i, j) of Ψ̂_n is the K_Q×K_Q covariance between
//! factor columns i and j.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{FitConfig, FitReport};
use crate::basis::{self, BasisInverses, BasisSet};
use crate::engine::SIGMA_FLOOR;
use crate::error::{Error, Result};
use crate::linalg;
use crate::weights::{TimePoints, WeightScheme};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// N observations, each a Q×P matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixObservations {
    y: Vec<DMatrix<f64>>,
}

impl MatrixObservations {
    pub fn new(y: Vec<DMatrix<f64>>) -> Result<Self> {
        let Some(first) = y.first() else {
            return Err(Error::InvalidInput("observations must be non-empty".into()));
        };
        let (q, p) = first.shape();
        if q == 0 || p == 0 {
            return Err(Error::InvalidInput("observation matrices must be non-empty".into()));
        }
        for (n, m) in y.iter().enumerate() {
            if m.shape() != (q, p) {
                return Err(Error::DimensionMismatch(format!(
                    "observation {n} is {}x{}, expected {q}x{p}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput("observations must be finite".into()));
            }
        }
        Ok(Self { y })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn q(&self) -> usize {
        self.y[0].nrows()
    }

    pub fn p(&self) -> usize {
        self.y[0].ncols()
    }

    pub fn get(&self, n: usize) -> &DMatrix<f64> {
        &self.y[n]
    }

    /// N×(Q·P) matrix whose row n is vec(y_n).
    pub fn flattened(&self) -> DMatrix<f64> {
        let qp = self.q() * self.p();
        DMatrix::from_fn(self.n(), qp, |n, j| self.y[n].as_slice()[j])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StVariant {
    /// One joint basis set of dimension K_P·K_Q.
    A,
    /// Separate bases: Γ_t (K_P) ⊗ Λ_t (K_Q).
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatioTemporalParams {
    pub variant: StVariant,
    /// Q×K_Q loadings.
    pub b: DMatrix<f64>,
    /// P×K_P loadings.
    pub c: DMatrix<f64>,
    pub sigma: DVector<f64>,
    pub phi: DVector<f64>,
    /// L: dimension K_P·K_Q (A) or K_Q (B).
    pub basis: BasisSet,
    pub weights: WeightScheme,
    /// G and ρ (variant B only).
    pub gamma: Option<BasisSet>,
    pub rho: Option<WeightScheme>,
}

impl SpatioTemporalParams {
    pub fn k_q(&self) -> usize {
        self.b.ncols()
    }

    pub fn k_p(&self) -> usize {
        self.c.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (kq, kp) = (self.k_q(), self.k_p());
        if self.sigma.len() != self.b.nrows() || self.phi.len() != self.c.nrows() {
            return Err(Error::DimensionMismatch(
                "Sigma/Phi lengths must match the loading rows".into(),
            ));
        }
        if self.sigma.iter().chain(self.phi.iter()).any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidInput("Sigma and Phi must be positive".into()));
        }
        basis::check_counts(&self.basis, &self.weights)?;
        match self.variant {
            StVariant::A => {
                if self.basis.dim() != kq * kp {
                    return Err(Error::DimensionMismatch(format!(
                        "variant A needs bases of dimension {}",
                        kq * kp
                    )));
                }
            }
            StVariant::B => {
                let (Some(g), Some(rho)) = (&self.gamma, &self.rho) else {
                    return Err(Error::InvalidInput("variant B needs G and rho".into()));
                };
                basis::check_counts(g, rho)?;
                if self.basis.dim() != kq || g.dim() != kp {
                    return Err(Error::DimensionMismatch(
                        "variant B needs K_Q×K_Q and K_P×K_P bases".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Prior covariance of vec(f) at time t.
    pub fn factor_covariance_at(&self, t: f64) -> Result<DMatrix<f64>> {
        let l = basis::lambda_at(t, &self.basis, &self.weights)?;
        match self.variant {
            StVariant::A => Ok(l),
            StVariant::B => {
                let g = basis::lambda_at(
                    t,
                    self.gamma.as_ref().expect("validated"),
                    self.rho.as_ref().expect("validated"),
                )?;
                Ok(g.kronecker(&l))
            }
        }
    }

    /// (C⊗B) Λ̄_t (C⊗B)ᵀ + Φ⊗Σ.
    pub fn marginal_covariance(&self, t: f64) -> Result<DMatrix<f64>> {
        let cb = self.c.kronecker(&self.b);
        let mut m = &cb * self.factor_covariance_at(t)? * cb.transpose();
        let noise = self.phi.kronecker(&self.sigma);
        for i in 0..noise.len() {
            m[(i, i)] += noise[i];
        }
        linalg::symmetrize(&mut m);
        Ok(m)
    }

    /// Rescales Φ to unit geometric mean, absorbing the factor into Σ.
    pub fn normalize_scale(&mut self) {
        let g = (self.phi.iter().map(|v| v.ln()).sum::<f64>() / self.phi.len() as f64).exp();
        self.phi /= g;
        self.sigma *= g;
    }
}

/// Posterior moments: η̂_n (K_Q×K_P) and Ψ̂_n (K_P·K_Q square).
#[derive(Debug, Clone, PartialEq)]
pub struct STEStepStats {
    pub eta: Vec<DMatrix<f64>>,
    pub psi: Vec<DMatrix<f64>>,
    pub k_q: usize,
    pub k_p: usize,
}

impl STEStepStats {
    /// Block {Ψ̂_n}_{ij}, i.e. the covariance of factor columns i and j.
    pub fn block(&self, n: usize, i: usize, j: usize) -> DMatrix<f64> {
        let k = self.k_q;
        self.psi[n].view((i * k, j * k), (k, k)).into_owned()
    }

    /// Σₙ {Ψ̂_n}_{ij} for all i, j (indexed i·K_P + j).
    fn summed_blocks(&self) -> Vec<DMatrix<f64>> {
        let kp = self.k_p;
        let mut total = DMatrix::zeros(self.k_q * kp, self.k_q * kp);
        for p in &self.psi {
            total += p;
        }
        let k = self.k_q;
        let mut out = Vec::with_capacity(kp * kp);
        for i in 0..kp {
            for j in 0..kp {
                out.push(total.view((i * k, j * k), (k, k)).into_owned());
            }
        }
        out
    }
}

struct Prepared {
    w: DMatrix<f64>,
    w_sums: Vec<f64>,
    rho: Option<(DMatrix<f64>, Vec<f64>)>,
}

impl Prepared {
    fn new(times: &[f64], params: &SpatioTemporalParams) -> Result<Self> {
        let w = params.weights.matrix(times)?;
        let rho = match &params.rho {
            Some(r) if params.variant == StVariant::B => {
                let m = r.matrix(times)?;
                let s = m.column_iter().map(|c| c.sum()).collect();
                Some((m, s))
            }
            _ => None,
        };
        Ok(Self {
            w_sums: w.column_iter().map(|c| c.sum()).collect(),
            w,
            rho,
        })
    }
}

struct StEval {
    stats: STEStepStats,
    /// Λ_{t_n}⁻¹ of the K_Q-dimensional basis set (variant B).
    lambda_prec: Vec<DMatrix<f64>>,
    log_lik: f64,
    log_prior: f64,
}

fn check(obs: &MatrixObservations, times: &TimePoints, params: &SpatioTemporalParams) -> Result<()> {
    params.validate()?;
    if obs.n() != times.len() {
        return Err(Error::DimensionMismatch("one time point per observation".into()));
    }
    if obs.q() != params.b.nrows() || obs.p() != params.c.nrows() {
        return Err(Error::DimensionMismatch(
            "observation shape does not match the loadings".into(),
        ));
    }
    Ok(())
}

fn evaluate(obs: &MatrixObservations, params: &SpatioTemporalParams, prep: &Prepared) -> Result<StEval> {
    let (kq, kp) = (params.k_q(), params.k_p());
    let (q, p) = (obs.q(), obs.p());
    let inv_l = params.basis.inverses()?;
    let prec_l = inv_l.precisions(&prep.w);
    let (inv_g, prec_g) = match (&params.gamma, &prep.rho) {
        (Some(g), Some((rw, _))) => {
            let inv = g.inverses()?;
            let prec = inv.precisions(rw);
            (Some(inv), Some(prec))
        }
        _ => (None, None),
    };
    let sig_inv = params.sigma.map(|v| 1.0 / v);
    let phi_inv = params.phi.map(|v| 1.0 / v);
    let mut bs = params.b.clone();
    for (i, mut row) in bs.row_iter_mut().enumerate() {
        row *= sig_inv[i];
    }
    let mut cs = params.c.clone();
    for (i, mut row) in cs.row_iter_mut().enumerate() {
        row *= phi_inv[i];
    }
    let gram = (params.c.transpose() * &cs).kronecker(&(params.b.transpose() * &bs));
    let ld_noise = q as f64 * params.phi.iter().map(|v| v.ln()).sum::<f64>()
        + p as f64 * params.sigma.iter().map(|v| v.ln()).sum::<f64>();

    struct Point {
        eta: DMatrix<f64>,
        psi: DMatrix<f64>,
        lambda_prec: DMatrix<f64>,
        ld_prec_l: f64,
        ld_prec_g: f64,
        log_pdf: f64,
    }
    let points: Vec<Result<Point>> = (0..obs.n())
        .into_par_iter()
        .map(|n| {
            let yn = obs.get(n);
            let pl = BasisInverses::column(&prec_l, n, inv_l.k);
            let ld_pl = linalg::spd_log_det(&pl, &format!("accumulated precision at point {n}"))?;
            let (prior_prec, ld_pg) = match &prec_g {
                Some(pg) => {
                    let g = BasisInverses::column(pg, n, kp);
                    let ld = linalg::spd_log_det(&g, &format!("spatial precision at point {n}"))?;
                    (g.kronecker(&pl), ld)
                }
                None => (pl.clone(), 0.0),
            };
            let ld_prior = match params.variant {
                StVariant::A => ld_pl,
                StVariant::B => kq as f64 * ld_pg + kp as f64 * ld_pl,
            };
            let a = &prior_prec + &gram;
            let ca = linalg::cholesky(&a, &format!("posterior precision at point {n}"))?;
            let ld_a = linalg::log_det_chol(&ca);
            let mut psi = ca.inverse();
            linalg::symmetrize(&mut psi);
            let h = linalg::vec(&(bs.transpose() * yn * &cs));
            let eta_vec = &psi * &h;
            let mut yy = 0.0;
            for j in 0..p {
                for i in 0..q {
                    yy += yn[(i, j)] * yn[(i, j)] * sig_inv[i] * phi_inv[j];
                }
            }
            let quad = (yy - h.dot(&eta_vec)).max(0.0);
            let log_det = ld_noise - ld_prior + ld_a;
            Ok(Point {
                eta: linalg::unvec(&eta_vec, kq, kp),
                psi,
                lambda_prec: pl,
                ld_prec_l: ld_pl,
                ld_prec_g: ld_pg,
                log_pdf: -0.5 * ((q * p) as f64 * LN_2PI + log_det + quad),
            })
        })
        .collect();
    let mut eta = Vec::with_capacity(obs.n());
    let mut psi = Vec::with_capacity(obs.n());
    let mut lambda_prec = Vec::with_capacity(obs.n());
    let mut log_lik = 0.0;
    let (mut sum_ld_l, mut sum_ld_g) = (0.0, 0.0);
    for pt in points {
        let pt = pt?;
        log_lik += pt.log_pdf;
        sum_ld_l += pt.ld_prec_l;
        sum_ld_g += pt.ld_prec_g;
        eta.push(pt.eta);
        psi.push(pt.psi);
        lambda_prec.push(pt.lambda_prec);
    }
    let prior_l = -0.5
        * prep
            .w_sums
            .iter()
            .zip(&inv_l.log_det)
            .map(|(c, ld)| c * ld)
            .sum::<f64>()
        - 0.5 * sum_ld_l;
    let log_prior = match (params.variant, &inv_g, &prep.rho) {
        (StVariant::A, _, _) => prior_l,
        (StVariant::B, Some(ig), Some((_, sums))) => {
            let prior_g = -0.5 * sums.iter().zip(&ig.log_det).map(|(c, ld)| c * ld).sum::<f64>()
                - 0.5 * sum_ld_g;
            kp as f64 * prior_l + kq as f64 * prior_g
        }
        _ => unreachable!("variant B always carries G"),
    };
    if !(log_lik.is_finite() && log_prior.is_finite()) {
        return Err(Error::NonFinite {
            context: "spatiotemporal log joint posterior".into(),
        });
    }
    Ok(StEval {
        stats: STEStepStats {
            eta,
            psi,
            k_q: kq,
            k_p: kp,
        },
        lambda_prec,
        log_lik,
        log_prior,
    })
}

/// Posterior moments of vec(f_n) without forming any (Q·P)-dimensional inverse.
pub fn e_step_st(
    obs: &MatrixObservations,
    times: &TimePoints,
    params: &SpatioTemporalParams,
) -> Result<STEStepStats> {
    check(obs, times, params)?;
    let prep = Prepared::new(times.as_slice(), params)?;
    evaluate(obs, params, &prep).map(|e| e.stats)
}

/// Log-likelihood plus the scaled basis priors.
pub fn st_log_joint_posterior(
    obs: &MatrixObservations,
    times: &TimePoints,
    params: &SpatioTemporalParams,
) -> Result<f64> {
    check(obs, times, params)?;
    let prep = Prepared::new(times.as_slice(), params)?;
    evaluate(obs, params, &prep).map(|e| e.log_lik + e.log_prior)
}

fn lambda_precisions(params: &SpatioTemporalParams, prep: &Prepared) -> Result<Vec<DMatrix<f64>>> {
    let inv = params.basis.inverses()?;
    let prec = inv.precisions(&prep.w);
    Ok((0..prep.w.nrows())
        .map(|n| BasisInverses::column(&prec, n, inv.k))
        .collect())
}

/// One full conditional-maximization sweep.
/// Variant A order: λ, Φ, Σ, C, B. Variant B order: γ, λ, Φ, Σ, C, B.
pub fn ecm_step_st(
    obs: &MatrixObservations,
    times: &TimePoints,
    stats: &STEStepStats,
    params: &SpatioTemporalParams,
) -> Result<SpatioTemporalParams> {
    check(obs, times, params)?;
    if stats.eta.len() != obs.n() || stats.k_q != params.k_q() || stats.k_p != params.k_p() {
        return Err(Error::DimensionMismatch("statistics do not match the model".into()));
    }
    let prep = Prepared::new(times.as_slice(), params)?;
    let lambda_prec = match params.variant {
        StVariant::B => lambda_precisions(params, &prep)?,
        StVariant::A => Vec::new(),
    };
    ecm_sweep(obs, stats, params, &prep, &lambda_prec)
}

fn weighted_average(
    terms: &[DMatrix<f64>],
    w: &DMatrix<f64>,
    sums: &[f64],
    divisor: f64,
) -> Result<BasisSet> {
    let k = terms[0].nrows();
    let mut packed = DMatrix::zeros(k * k, terms.len());
    for (n, t) in terms.iter().enumerate() {
        packed.column_mut(n).copy_from_slice(t.as_slice());
    }
    let num = packed * w;
    let mut lambdas = Vec::with_capacity(w.ncols());
    for d in 0..w.ncols() {
        if !(sums[d] > 0.0) {
            return Err(Error::ZeroBasisWeight { basis: d });
        }
        let mut l = DMatrix::from_column_slice(k, k, num.column(d).as_slice()) / (divisor * sums[d]);
        linalg::symmetrize(&mut l);
        lambdas.push(l);
    }
    Ok(BasisSet { lambdas })
}

fn ecm_sweep(
    obs: &MatrixObservations,
    stats: &STEStepStats,
    params: &SpatioTemporalParams,
    prep: &Prepared,
    lambda_prec: &[DMatrix<f64>],
) -> Result<SpatioTemporalParams> {
    let (kq, kp) = (stats.k_q, stats.k_p);
    let (q, p, n_obs) = (obs.q(), obs.p(), obs.n());
    let nf = n_obs as f64;
    let blocks = stats.summed_blocks();
    let blk = |i: usize, j: usize| &blocks[i * kp + j];

    // Bases.
    let (basis, gamma) = match params.variant {
        StVariant::A => {
            let terms: Vec<DMatrix<f64>> = (0..n_obs)
                .map(|n| {
                    let v = linalg::vec(&stats.eta[n]);
                    &v * v.transpose() + &stats.psi[n]
                })
                .collect();
            (weighted_average(&terms, &prep.w, &prep.w_sums, 1.0)?, None)
        }
        StVariant::B => {
            let (rw, rsums) = prep.rho.as_ref().expect("variant B has rho");
            let g_terms: Vec<DMatrix<f64>> = (0..n_obs)
                .map(|n| {
                    let li = &lambda_prec[n];
                    let mut m = stats.eta[n].transpose() * li * &stats.eta[n];
                    for i in 0..kp {
                        for j in 0..kp {
                            m[(i, j)] += (stats.block(n, i, j) * li).trace();
                        }
                    }
                    m
                })
                .collect();
            let gamma = weighted_average(&g_terms, rw, rsums, kq as f64)?;
            let g_inv = gamma.inverses()?;
            let g_prec = g_inv.precisions(rw);
            let l_terms: Vec<DMatrix<f64>> = (0..n_obs)
                .map(|n| {
                    let gi = BasisInverses::column(&g_prec, n, kp);
                    let mut m = &stats.eta[n] * &gi * stats.eta[n].transpose();
                    for i in 0..kp {
                        for j in 0..kp {
                            m += stats.block(n, i, j) * gi[(i, j)];
                        }
                    }
                    m
                })
                .collect();
            (
                weighted_average(&l_terms, &prep.w, &prep.w_sums, kp as f64)?,
                Some(gamma),
            )
        }
    };

    let (b0, c0) = (&params.b, &params.c);
    let resid: Vec<DMatrix<f64>> = (0..n_obs)
        .map(|n| obs.get(n) - b0 * &stats.eta[n] * c0.transpose())
        .collect();

    // Φ given B, C, Σ.
    let sig_inv0 = params.sigma.map(|v| 1.0 / v);
    let mut bsb0 = b0.transpose() * DMatrix::from_diagonal(&sig_inv0) * b0;
    linalg::symmetrize(&mut bsb0);
    let mut phi = DVector::zeros(p);
    for pp in 0..p {
        let mut acc = 0.0;
        for r in &resid {
            for qq in 0..q {
                acc += r[(qq, pp)] * r[(qq, pp)] * sig_inv0[qq];
            }
        }
        for i in 0..kp {
            for j in 0..kp {
                acc += c0[(pp, i)] * c0[(pp, j)] * (&bsb0 * blk(i, j)).trace();
            }
        }
        phi[pp] = (acc / (q as f64 * nf)).max(SIGMA_FLOOR);
    }

    // Σ given Φ_new, B, C.
    let phi_inv = phi.map(|v| 1.0 / v);
    let mut cpc0 = c0.transpose() * DMatrix::from_diagonal(&phi_inv) * c0;
    linalg::symmetrize(&mut cpc0);
    let mut sigma = DVector::zeros(q);
    for qq in 0..q {
        let mut acc = 0.0;
        for r in &resid {
            for pp in 0..p {
                acc += r[(qq, pp)] * r[(qq, pp)] * phi_inv[pp];
            }
        }
        let bq = b0.row(qq);
        for i in 0..kp {
            for j in 0..kp {
                acc += cpc0[(i, j)] * (bq * blk(i, j)).dot(&bq);
            }
        }
        sigma[qq] = (acc / (p as f64 * nf)).max(SIGMA_FLOOR);
    }

    // C given Σ_new, B.
    let sig_inv = sigma.map(|v| 1.0 / v);
    let mut bsb = b0.transpose() * DMatrix::from_diagonal(&sig_inv) * b0;
    linalg::symmetrize(&mut bsb);
    let sb = DMatrix::from_diagonal(&sig_inv) * b0;
    let mut c_num = DMatrix::zeros(p, kp);
    let mut c_den = DMatrix::zeros(kp, kp);
    for n in 0..n_obs {
        c_num += obs.get(n).transpose() * &sb * &stats.eta[n];
        c_den += stats.eta[n].transpose() * &bsb * &stats.eta[n];
    }
    for i in 0..kp {
        for j in 0..kp {
            c_den[(i, j)] += (&bsb * blk(i, j)).trace();
        }
    }
    linalg::symmetrize(&mut c_den);
    let c = linalg::solve_right_spd(&c_num, &c_den, "normal equations of C")?;

    // B given C_new, Φ_new.
    let mut cpc = c.transpose() * DMatrix::from_diagonal(&phi_inv) * &c;
    linalg::symmetrize(&mut cpc);
    let pc = DMatrix::from_diagonal(&phi_inv) * &c;
    let mut b_num = DMatrix::zeros(q, kq);
    let mut b_den = DMatrix::zeros(kq, kq);
    for n in 0..n_obs {
        b_num += obs.get(n) * &pc * stats.eta[n].transpose();
        b_den += &stats.eta[n] * &cpc * stats.eta[n].transpose();
    }
    for i in 0..kp {
        for j in 0..kp {
            b_den += blk(i, j) * cpc[(i, j)];
        }
    }
    linalg::symmetrize(&mut b_den);
    let b = linalg::solve_right_spd(&b_num, &b_den, "normal equations of B")?;

    Ok(SpatioTemporalParams {
        variant: params.variant,
        b,
        c,
        sigma,
        phi,
        basis,
        weights: params.weights.clone(),
        gamma: gamma.or_else(|| params.gamma.clone()),
        rho: params.rho.clone(),
    })
}

/// Default initialization: bases at identity, Σ = Φ = 1, B small random,
/// C with unit entries at (k, k) and small random elsewhere.
#[allow(clippy::too_many_arguments)]
pub fn initial_st_params(
    q: usize,
    p: usize,
    k_q: usize,
    k_p: usize,
    omega: &WeightScheme,
    rho: Option<&WeightScheme>,
    variant: StVariant,
    seed: u64,
) -> Result<SpatioTemporalParams> {
    if k_q == 0 || k_p == 0 || k_p > p {
        return Err(Error::InvalidInput("need 1 <= K_P <= P and K_Q >= 1".into()));
    }
    let mut rng = crate::rng::stream(seed, "init-st", 0);
    let normal = Normal::new(0.0, 1e-3).expect("valid normal");
    let b = DMatrix::from_fn(q, k_q, |_, _| normal.sample(&mut rng));
    let c = DMatrix::from_fn(p, k_p, |i, j| if i == j { 1.0 } else { normal.sample(&mut rng) });
    let (basis, gamma, rho) = match variant {
        StVariant::A => (BasisSet::identity(omega.n_bases(), k_q * k_p), None, None),
        StVariant::B => {
            let rho = rho.cloned().unwrap_or_else(|| omega.clone());
            (
                BasisSet::identity(omega.n_bases(), k_q),
                Some(BasisSet::identity(rho.n_bases(), k_p)),
                Some(rho),
            )
        }
    };
    let params = SpatioTemporalParams {
        variant,
        b,
        c,
        sigma: DVector::from_element(q, 1.0),
        phi: DVector::from_element(p, 1.0),
        basis,
        weights: omega.clone(),
        gamma,
        rho,
    };
    params.validate()?;
    Ok(params)
}

/// ECM fit from given initial parameters. The Φ/Σ scale is normalized
/// after the last iteration (this leaves the likelihood unchanged).
pub fn fit_st_from(
    obs: &MatrixObservations,
    times: &TimePoints,
    init: SpatioTemporalParams,
    config: &FitConfig,
) -> Result<(SpatioTemporalParams, FitReport)> {
    if config.max_iter == 0 || !(config.rel_tol > 0.0) {
        return Err(Error::InvalidInput("invalid convergence settings".into()));
    }
    check(obs, times, &init)?;
    if obs.n() < 2 {
        return Err(Error::InvalidInput("at least two observations are required".into()));
    }
    let prep = Prepared::new(times.as_slice(), &init)?;
    let mut params = init;
    let mut report = FitReport::default();
    let mut iter = 0;
    loop {
        let eval = evaluate(obs, &params, &prep).map_err(|e| e.at_iteration(iter))?;
        let obj = eval.log_lik + eval.log_prior;
        if let Some(prev) = report.trace.last() {
            if ((obj - prev) / prev.abs().max(f64::MIN_POSITIVE)).abs() < config.rel_tol {
                report.converged = true;
            }
        }
        report.trace.push(obj);
        if report.converged || iter >= config.max_iter {
            report.iterations = iter;
            params.normalize_scale();
            return Ok((params, report));
        }
        params = ecm_sweep(obs, &eval.stats, &params, &prep, &eval.lambda_prec)
            .map_err(|e| e.at_iteration(iter))?;
        iter += 1;
    }
}

/// ECM fit from the default initialization. `config.k` is K_Q.
pub fn fit_st(
    obs: &MatrixObservations,
    times: &TimePoints,
    omega: &WeightScheme,
    rho: Option<&WeightScheme>,
    k_p: usize,
    config: &FitConfig,
    variant: StVariant,
) -> Result<(SpatioTemporalParams, FitReport)> {
    let init = initial_st_params(
        obs.q(),
        obs.p(),
        config.k,
        k_p,
        omega,
        rho,
        variant,
        config.seed,
    )?;
    fit_st_from(obs, times, init, config)
}
