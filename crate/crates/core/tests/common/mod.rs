//! Independent oracles shared by the integration tests: literal Q-functions
//! written straight from the model definitions (no cancellations applied)
//! and a generic numerical maximizer.

#![allow(dead_code)]

pub mod fits;
pub mod oracle;

use argmin::core::{CostFunction, Executor, Gradient, State};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::LBFGS;
use hetfactor::em::spatiotemporal::{STEStepStats, SpatioTemporalParams, StVariant};
use hetfactor::MatrixObservations;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(r))
}

/// Random SPD matrix with eigenvalues bounded away from zero.
pub fn random_spd(r: &mut ChaCha8Rng, k: usize) -> DMatrix<f64> {
    let a = normal_matrix(r, k, k);
    &a * a.transpose() / k as f64 + DMatrix::identity(k, k) * r.random_range(0.3..1.0)
}

/// Relative Frobenius distance ‖a − b‖/‖b‖.
pub fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

pub fn rel_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

pub fn log_det(m: &DMatrix<f64>) -> f64 {
    match m.clone().cholesky() {
        Some(c) => 2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>(),
        None => f64::NAN,
    }
}

pub fn inv(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().try_inverse().expect("invertible")
}

// ---------------------------------------------------------------------------
// Numerical maximization

struct Negated<'a> {
    f: &'a dyn Fn(&[f64]) -> f64,
}

impl Negated<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        let v = -(self.f)(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    }
}

impl CostFunction for Negated<'_> {
    type Param = Vec<f64>;
    type Output = f64;
    fn cost(&self, x: &Self::Param) -> Result<f64, argmin::core::Error> {
        Ok(self.value(x))
    }
}

impl Gradient for Negated<'_> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;
    fn gradient(&self, x: &Self::Param) -> Result<Vec<f64>, argmin::core::Error> {
        Ok(central_gradient(&|v| self.value(v), x))
    }
}

pub fn central_gradient(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = 1e-6 * x[i].abs().max(1.0);
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Maximizes `f` from `x0` by L-BFGS with central-difference gradients.
pub fn maximize(f: &dyn Fn(&[f64]) -> f64, x0: Vec<f64>) -> Vec<f64> {
    let problem = Negated { f };
    let solver = LBFGS::new(MoreThuenteLineSearch::new(), 20)
        .with_tolerance_grad(1e-11)
        .expect("valid tolerance")
        .with_tolerance_cost(0.0)
        .expect("valid tolerance");
    let res = Executor::new(problem, solver)
        .configure(|s| s.param(x0).max_iters(5000))
        .run()
        .expect("optimizer runs");
    res.state().get_best_param().cloned().expect("best parameter")
}

// ---------------------------------------------------------------------------
// Parameterizations

/// SPD matrix as the lower Cholesky factor with log-diagonal.
pub fn spd_to_vec(m: &DMatrix<f64>, out: &mut Vec<f64>) {
    let l = m.clone().cholesky().expect("SPD").l();
    for j in 0..m.ncols() {
        for i in j..m.nrows() {
            out.push(if i == j { l[(i, j)].ln() } else { l[(i, j)] });
        }
    }
}

pub fn spd_from_vec(x: &[f64], k: usize) -> (DMatrix<f64>, usize) {
    let mut l = DMatrix::zeros(k, k);
    let mut pos = 0;
    for j in 0..k {
        for i in j..k {
            l[(i, j)] = if i == j { x[pos].exp() } else { x[pos] };
            pos += 1;
        }
    }
    (&l * l.transpose(), pos)
}

pub fn spd_len(k: usize) -> usize {
    k * (k + 1) / 2
}

pub fn bases_to_vec(ls: &[DMatrix<f64>]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in ls {
        spd_to_vec(l, &mut out);
    }
    out
}

pub fn bases_from_vec(x: &[f64], d: usize, k: usize) -> Vec<DMatrix<f64>> {
    (0..d)
        .map(|i| spd_from_vec(&x[i * spd_len(k)..], k).0)
        .collect()
}

// ---------------------------------------------------------------------------
// Q-functions of the vector model

/// E[log p(F | L)] + log p(L) (+ inverse-Wishart terms), written literally
/// with the accumulated precisions P_n = Σ_d ω_{nd} λ_d⁻¹.
pub fn q1_basis(
    lambdas: &[DMatrix<f64>],
    w: &DMatrix<f64>,
    moments: &[DMatrix<f64>],
    iw: Option<(f64, &DMatrix<f64>)>,
) -> f64 {
    let invs: Vec<DMatrix<f64>> = lambdas.iter().map(inv).collect();
    let lds: Vec<f64> = lambdas.iter().map(log_det).collect();
    let k = lambdas[0].nrows();
    let mut total = 0.0;
    for n in 0..w.nrows() {
        let mut p = DMatrix::zeros(k, k);
        for d in 0..lambdas.len() {
            p += &invs[d] * w[(n, d)];
        }
        let ldp = log_det(&p);
        // log-density of the factors up to constants
        total += 0.5 * ldp - 0.5 * (&p * &moments[n]).trace();
        // basis prior
        for d in 0..lambdas.len() {
            total -= 0.5 * w[(n, d)] * lds[d];
        }
        total -= 0.5 * ldp;
    }
    if let Some((dof, theta)) = iw {
        for d in 0..lambdas.len() {
            total += -0.5 * dof * lds[d] - 0.5 * (theta * &invs[d]).trace();
        }
    }
    total
}

/// E[log p(Y | F, B, Σ)] with per-point scale weights ξ_n².
pub fn q2_b_sigma(
    y: &DMatrix<f64>,
    b: &DMatrix<f64>,
    sigma: &DVector<f64>,
    eta: &[DVector<f64>],
    psi: &[DMatrix<f64>],
    xi2: &[f64],
) -> f64 {
    let mut total = 0.0;
    for n in 0..y.nrows() {
        for q in 0..y.ncols() {
            let bq = b.row(q).transpose();
            let e = y[(n, q)] - bq.dot(&eta[n]);
            let r = xi2[n] * e * e + (&psi[n] * &bq).dot(&bq);
            total += -0.5 * sigma[q].ln() - 0.5 * r / sigma[q];
        }
    }
    total
}

/// E[log p(Y | F, B, U)] + log p(U) for harmonic time-varying Σ, literal.
/// `wt[q]` is the N×D_q weight matrix of coordinate q.
pub fn q2_tv(
    y: &DMatrix<f64>,
    b: &DMatrix<f64>,
    nus: &[DVector<f64>],
    wt: &[DMatrix<f64>],
    eta: &[DVector<f64>],
    psi: &[DMatrix<f64>],
) -> f64 {
    let mut total = 0.0;
    for q in 0..y.ncols() {
        let bq = b.row(q).transpose();
        for n in 0..y.nrows() {
            let prec: f64 = (0..nus[q].len()).map(|d| wt[q][(n, d)] / nus[q][d]).sum();
            let e = y[(n, q)] - bq.dot(&eta[n]);
            let r = e * e + (&psi[n] * &bq).dot(&bq);
            total += 0.5 * prec.ln() - 0.5 * r * prec;
            for d in 0..nus[q].len() {
                total -= 0.5 * wt[q][(n, d)] * nus[q][d].ln();
            }
            total -= 0.5 * prec.ln();
        }
    }
    total
}

// ---------------------------------------------------------------------------
// Q-function of the matrix-variate models, with dense Kronecker algebra

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    DMatrix::from_fn(ar * br, ac * bc, |i, j| a[(i / br, j / bc)] * b[(i % br, j % bc)])
}

fn vec_of(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

fn accumulated(ls: &[DMatrix<f64>], w: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let k = ls[0].nrows();
    let mut p = DMatrix::zeros(k, k);
    for (d, l) in ls.iter().enumerate() {
        p += inv(l) * w[(n, d)];
    }
    p
}

fn harmonic_prior(ls: &[DMatrix<f64>], w: &DMatrix<f64>) -> f64 {
    let mut total = 0.0;
    for n in 0..w.nrows() {
        for (d, l) in ls.iter().enumerate() {
            total -= 0.5 * w[(n, d)] * log_det(l);
        }
        total -= 0.5 * log_det(&accumulated(ls, w, n));
    }
    total
}

/// Expected complete-data log joint posterior of the spatiotemporal model
/// under fixed posterior moments.
pub fn q_st(
    obs: &MatrixObservations,
    w: &DMatrix<f64>,
    rho_w: Option<&DMatrix<f64>>,
    stats: &STEStepStats,
    params: &SpatioTemporalParams,
) -> f64 {
    let (q, p) = (obs.q(), obs.p());
    let m = kron(&params.c, &params.b);
    let noise = DVector::from_fn(q * p, |i, _| params.phi[i / q] * params.sigma[i % q]);
    let ld_noise: f64 = noise.iter().map(|v| v.ln()).sum();
    let kp = params.c.ncols();
    let kq = params.b.ncols();
    let mut total = 0.0;
    for n in 0..obs.n() {
        let y = vec_of(obs.get(n));
        let eta = vec_of(&stats.eta[n]);
        let e = &y - &m * &eta;
        let quad: f64 = e.iter().zip(noise.iter()).map(|(v, s)| v * v / s).sum();
        let mw = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] / noise[i]);
        let tr = (m.transpose() * mw * &stats.psi[n]).trace();
        total += -0.5 * ld_noise - 0.5 * (quad + tr);

        let prec = match params.variant {
            StVariant::A => accumulated(&params.basis.lambdas, w, n),
            StVariant::B => kron(
                &accumulated(&params.gamma.as_ref().unwrap().lambdas, rho_w.unwrap(), n),
                &accumulated(&params.basis.lambdas, w, n),
            ),
        };
        let second = &eta * eta.transpose() + &stats.psi[n];
        total += 0.5 * log_det(&prec) - 0.5 * (&prec * second).trace();
    }
    total += match params.variant {
        StVariant::A => harmonic_prior(&params.basis.lambdas, w),
        StVariant::B => {
            kp as f64 * harmonic_prior(&params.basis.lambdas, w)
                + kq as f64
                    * harmonic_prior(&params.gamma.as_ref().unwrap().lambdas, rho_w.unwrap())
        }
    };
    total
}

// ---------------------------------------------------------------------------
// Random instances

/// Random weight scheme with `d` centers spread over [0, n].
pub fn random_scheme(r: &mut ChaCha8Rng, d: usize, n: usize) -> hetfactor::WeightScheme {
    if d == 1 {
        return hetfactor::WeightScheme::homoscedastic();
    }
    let centers: Vec<f64> = (0..d).map(|_| r.random_range(0.0..n as f64)).collect();
    let h = r.random_range(0.2..1.0) * n as f64;
    hetfactor::WeightScheme::new(centers, vec![h; d]).expect("valid scheme")
}

/// Random posterior moments (η̂_n, Ψ̂_n).
pub fn random_stats(r: &mut ChaCha8Rng, n: usize, k: usize) -> hetfactor::EStepStats {
    hetfactor::EStepStats {
        eta: (0..n)
            .map(|_| DVector::from_fn(k, |_, _| StandardNormal.sample(r)))
            .collect(),
        psi: (0..n).map(|_| random_spd(r, k) * 0.3).collect(),
    }
}
