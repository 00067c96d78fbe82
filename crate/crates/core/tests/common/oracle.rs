//! Closed-form updates checked against numerical maximizers of the
//! corresponding Q-functions. Each check returns the worst relative error.

use hetfactor::em::gaussian::cm_step_tv_sigma;
use hetfactor::em::robust::RobustEStepStats;
use hetfactor::em::spatiotemporal::{SpatioTemporalParams, StVariant};
use hetfactor::{
    e_step_st, ecm_step_st, m_step, m_step_robust, BasisSet, EStepStats, FactorModelParams,
    MatrixObservations, Observations, RegularizationConfig, Sigma, TimePoints, TvSigma,
    WeightScheme,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::*;

pub struct VecInstance {
    pub obs: Observations,
    pub times: TimePoints,
    pub scheme: WeightScheme,
    pub w: DMatrix<f64>,
    pub stats: EStepStats,
    pub xi2: Vec<f64>,
    pub k: usize,
}

/// N ≤ 40, Q ≤ 10, K ≤ 3, D ≤ 5.
pub fn vec_instance(seed: u64) -> VecInstance {
    let mut r = rng(seed);
    let n = r.random_range(5..=40);
    let q = r.random_range(1..=10);
    let k = r.random_range(1..=3);
    let d = r.random_range(1..=5);
    let times = TimePoints::regular(n);
    let scheme = random_scheme(&mut r, d, n);
    let w = scheme.matrix(times.as_slice()).unwrap();
    let obs = Observations::new(normal_matrix(&mut r, n, q)).unwrap();
    let stats = random_stats(&mut r, n, k);
    let xi2 = (0..n).map(|_| r.random_range(0.2..2.0)).collect();
    VecInstance {
        obs,
        times,
        scheme,
        w,
        stats,
        xi2,
        k,
    }
}

fn moments(stats: &EStepStats, xi2: Option<&[f64]>) -> Vec<DMatrix<f64>> {
    stats
        .eta
        .iter()
        .zip(&stats.psi)
        .enumerate()
        .map(|(n, (e, p))| e * e.transpose() * xi2.map(|x| x[n]).unwrap_or(1.0) + p)
        .collect()
}

fn worst_basis(found: &[DMatrix<f64>], oracle: &[DMatrix<f64>]) -> f64 {
    found
        .iter()
        .zip(oracle)
        .map(|(a, b)| rel(a, b))
        .fold(0.0, f64::max)
}

fn basis_oracle(inst: &VecInstance, m: &[DMatrix<f64>], iw: Option<(f64, &DMatrix<f64>)>) -> Vec<DMatrix<f64>> {
    let (d, k) = (inst.w.ncols(), inst.k);
    let f = |x: &[f64]| q1_basis(&bases_from_vec(x, d, k), &inst.w, m, iw);
    let x0 = bases_to_vec(&vec![DMatrix::identity(k, k); d]);
    bases_from_vec(&maximize(&f, x0), d, k)
}

fn b_sigma_oracle(inst: &VecInstance, xi2: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
    let (q, k) = (inst.obs.q(), inst.k);
    let y = inst.obs.y();
    let f = |x: &[f64]| {
        let b = DMatrix::from_column_slice(q, k, &x[..q * k]);
        let s = DVector::from_fn(q, |i, _| x[q * k + i].exp());
        q2_b_sigma(y, &b, &s, &inst.stats.eta, &inst.stats.psi, xi2)
    };
    let x = maximize(&f, vec![0.0; q * k + q]);
    (
        DMatrix::from_column_slice(q, k, &x[..q * k]),
        DVector::from_fn(q, |i, _| x[q * k + i].exp()),
    )
}

fn constant_sigma(p: &FactorModelParams) -> &DVector<f64> {
    match &p.sigma {
        Sigma::Constant(s) => s,
        Sigma::TimeVarying(_) => panic!("constant Sigma expected"),
    }
}

/// Free bases plus joint B and Σ.
pub fn gaussian(seed: u64) -> f64 {
    let inst = vec_instance(seed);
    let out = m_step(&inst.obs, &inst.times, &inst.stats, &inst.scheme, &RegularizationConfig::default()).unwrap();
    let m = moments(&inst.stats, None);
    let lam = basis_oracle(&inst, &m, None);
    let (b, s) = b_sigma_oracle(&inst, &vec![1.0; inst.obs.n()]);
    worst_basis(&out.basis.lambdas, &lam)
        .max(rel(&out.b, &b))
        .max(rel_vec(constant_sigma(&out), &s))
}

/// Diagonal bases.
pub fn diagonal(seed: u64) -> f64 {
    let inst = vec_instance(seed);
    let out = m_step(&inst.obs, &inst.times, &inst.stats, &inst.scheme, &RegularizationConfig::diagonal()).unwrap();
    let m = moments(&inst.stats, None);
    let (d, k) = (inst.w.ncols(), inst.k);
    let diag = |x: &[f64]| -> Vec<DMatrix<f64>> {
        (0..d)
            .map(|i| DMatrix::from_diagonal(&DVector::from_fn(k, |j, _| x[i * k + j].exp())))
            .collect()
    };
    let f = |x: &[f64]| q1_basis(&diag(x), &inst.w, &m, None);
    let lam = diag(&maximize(&f, vec![0.0; d * k]));
    worst_basis(&out.basis.lambdas, &lam)
}

/// Inverse-Wishart MAP bases.
pub fn inverse_wishart(seed: u64) -> f64 {
    let inst = vec_instance(seed);
    let mut r = rng(seed ^ 0x1357);
    let k = inst.k;
    let zeta = k as f64 - 1.0 + r.random_range(0.5..5.0);
    let theta = random_spd(&mut r, k);
    let reg = RegularizationConfig::inverse_wishart(Some(zeta), Some(theta.clone()));
    let out = m_step(&inst.obs, &inst.times, &inst.stats, &inst.scheme, &reg).unwrap();
    let m = moments(&inst.stats, None);
    let lam = basis_oracle(&inst, &m, Some((reg.iw_dof(k), &theta)));
    worst_basis(&out.basis.lambdas, &lam)
}

/// Scale-weighted bases, B and Σ of the Student-t model.
pub fn robust(seed: u64) -> f64 {
    let inst = vec_instance(seed);
    let stats = RobustEStepStats {
        stats: inst.stats.clone(),
        xi2: inst.xi2.clone(),
    };
    let out = m_step_robust(&inst.obs, &inst.times, &stats, &inst.scheme, &RegularizationConfig::default()).unwrap();
    let m = moments(&inst.stats, Some(&inst.xi2));
    let lam = basis_oracle(&inst, &m, None);
    let (b, s) = b_sigma_oracle(&inst, &inst.xi2);
    worst_basis(&out.basis.lambdas, &lam)
        .max(rel(&out.b, &b))
        .max(rel_vec(constant_sigma(&out), &s))
}

/// Conditional B and basis-scalar updates under time-varying Σ.
pub fn tv_sigma(seed: u64) -> f64 {
    let inst = vec_instance(seed);
    let mut r = rng(seed ^ 0x2468);
    let (n, q, k) = (inst.obs.n(), inst.obs.q(), inst.k);
    let schemes: Vec<WeightScheme> = (0..q)
        .map(|_| {
            let d = r.random_range(1..=3);
            random_scheme(&mut r, d, n)
        })
        .collect();
    let scalars: Vec<DVector<f64>> = schemes
        .iter()
        .map(|s| DVector::from_fn(s.n_bases(), |_, _| r.random_range(0.3..2.0)))
        .collect();
    let params = FactorModelParams {
        b: normal_matrix(&mut r, q, k),
        sigma: Sigma::TimeVarying(TvSigma {
            scalars: scalars.clone(),
            schemes: schemes.clone(),
        }),
        basis: BasisSet::identity(inst.scheme.n_bases(), k),
        weights: inst.scheme.clone(),
    };
    let (b_new, u) = cm_step_tv_sigma(&inst.obs, &inst.times, &inst.stats, &params).unwrap();
    let wt: Vec<DMatrix<f64>> = schemes.iter().map(|s| s.matrix(inst.times.as_slice()).unwrap()).collect();
    let y = inst.obs.y();
    let (eta, psi) = (&inst.stats.eta, &inst.stats.psi);

    let fb = |x: &[f64]| q2_tv(y, &DMatrix::from_column_slice(q, k, x), &scalars, &wt, eta, psi);
    let b_or = DMatrix::from_column_slice(q, k, &maximize(&fb, vec![0.0; q * k]));

    let sizes: Vec<usize> = scalars.iter().map(|s| s.len()).collect();
    let unpack = |x: &[f64]| -> Vec<DVector<f64>> {
        let mut pos = 0;
        sizes
            .iter()
            .map(|&len| {
                let v = DVector::from_fn(len, |i, _| x[pos + i].exp());
                pos += len;
                v
            })
            .collect()
    };
    let fu = |x: &[f64]| q2_tv(y, &b_new, &unpack(x), &wt, eta, psi);
    let u_or = unpack(&maximize(&fu, vec![0.0; sizes.iter().sum()]));
    let worst_u = u
        .scalars
        .iter()
        .zip(&u_or)
        .map(|(a, b)| rel_vec(a, b))
        .fold(0.0, f64::max);
    rel(&b_new, &b_or).max(worst_u)
}

pub struct StInstance {
    pub obs: MatrixObservations,
    pub times: TimePoints,
    pub params: SpatioTemporalParams,
    pub w: DMatrix<f64>,
    pub rho_w: Option<DMatrix<f64>>,
}

/// Q = 3, P ≤ 3, K_Q ≤ 2, K_P ≤ 2, N ≤ 8, D ≤ 3.
pub fn st_instance(seed: u64, variant: StVariant) -> StInstance {
    let mut r = rng(seed);
    let n = r.random_range(4..=8);
    let (q, p) = (3, r.random_range(2..=3));
    let k_q = r.random_range(1..=2);
    let k_p = r.random_range(1..=2);
    let times = TimePoints::regular(n);
    let d = r.random_range(1..=3);
    let omega = random_scheme(&mut r, d, n);
    let obs = MatrixObservations::new((0..n).map(|_| normal_matrix(&mut r, q, p)).collect()).unwrap();
    let (basis, gamma, rho) = match variant {
        StVariant::A => (
            BasisSet::new((0..d).map(|_| random_spd(&mut r, k_q * k_p)).collect()).unwrap(),
            None,
            None,
        ),
        StVariant::B => {
            let dr = r.random_range(1..=3);
            let rho = random_scheme(&mut r, dr, n);
            (
                BasisSet::new((0..d).map(|_| random_spd(&mut r, k_q)).collect()).unwrap(),
                Some(BasisSet::new((0..dr).map(|_| random_spd(&mut r, k_p)).collect()).unwrap()),
                Some(rho),
            )
        }
    };
    let params = SpatioTemporalParams {
        variant,
        b: normal_matrix(&mut r, q, k_q),
        c: normal_matrix(&mut r, p, k_p),
        sigma: DVector::from_fn(q, |_, _| r.random_range(0.3..2.0)),
        phi: DVector::from_fn(p, |_, _| r.random_range(0.3..2.0)),
        basis,
        weights: omega.clone(),
        gamma,
        rho: rho.clone(),
    };
    StInstance {
        w: omega.matrix(times.as_slice()).unwrap(),
        rho_w: rho.map(|s| s.matrix(times.as_slice()).unwrap()),
        obs,
        times,
        params,
    }
}

/// Every conditional update of one sweep against a numerical conditional
/// maximizer, each given the blocks already updated earlier in the sweep.
pub fn spatiotemporal(seed: u64, variant: StVariant) -> f64 {
    let inst = st_instance(seed, variant);
    let p0 = &inst.params;
    let stats = e_step_st(&inst.obs, &inst.times, p0).unwrap();
    let out = ecm_step_st(&inst.obs, &inst.times, &stats, p0).unwrap();
    let q_of = |p: &SpatioTemporalParams| q_st(&inst.obs, &inst.w, inst.rho_w.as_ref(), &stats, p);
    let (q, p, k_q, k_p) = (p0.b.nrows(), p0.c.nrows(), p0.b.ncols(), p0.c.ncols());
    let mut worst: f64 = 0.0;

    // Bases (γ first for the separable model, then λ given the new γ).
    let mut cur = p0.clone();
    if variant == StVariant::B {
        let dg = p0.gamma.as_ref().unwrap().len();
        let f = |x: &[f64]| {
            let mut t = cur.clone();
            t.gamma = Some(BasisSet { lambdas: bases_from_vec(x, dg, k_p) });
            q_of(&t)
        };
        let g = bases_from_vec(&maximize(&f, bases_to_vec(&vec![DMatrix::identity(k_p, k_p); dg])), dg, k_p);
        worst = worst.max(worst_basis(&out.gamma.as_ref().unwrap().lambdas, &g));
        cur.gamma = out.gamma.clone();
    }
    let dl = p0.basis.len();
    let kl = p0.basis.dim();
    let f = |x: &[f64]| {
        let mut t = cur.clone();
        t.basis = BasisSet { lambdas: bases_from_vec(x, dl, kl) };
        q_of(&t)
    };
    let l = bases_from_vec(&maximize(&f, bases_to_vec(&vec![DMatrix::identity(kl, kl); dl])), dl, kl);
    worst = worst.max(worst_basis(&out.basis.lambdas, &l));
    cur.basis = out.basis.clone();

    // Φ given B, C, Σ.
    let f = |x: &[f64]| {
        let mut t = cur.clone();
        t.phi = DVector::from_fn(p, |i, _| x[i].exp());
        q_of(&t)
    };
    let phi = DVector::from_iterator(p, maximize(&f, vec![0.0; p]).into_iter().map(f64::exp));
    worst = worst.max(rel_vec(&out.phi, &phi));
    cur.phi = out.phi.clone();

    // Σ given the new Φ.
    let f = |x: &[f64]| {
        let mut t = cur.clone();
        t.sigma = DVector::from_fn(q, |i, _| x[i].exp());
        q_of(&t)
    };
    let sigma = DVector::from_iterator(q, maximize(&f, vec![0.0; q]).into_iter().map(f64::exp));
    worst = worst.max(rel_vec(&out.sigma, &sigma));
    cur.sigma = out.sigma.clone();

    // C given the new Σ.
    let f = |x: &[f64]| {
        let mut t = cur.clone();
        t.c = DMatrix::from_column_slice(p, k_p, x);
        q_of(&t)
    };
    let c = DMatrix::from_column_slice(p, k_p, &maximize(&f, p0.c.as_slice().to_vec()));
    worst = worst.max(rel(&out.c, &c));
    cur.c = out.c.clone();

    // B given the new C.
    let f = |x: &[f64]| {
        let mut t = cur.clone();
        t.b = DMatrix::from_column_slice(q, k_q, x);
        q_of(&t)
    };
    let b = DMatrix::from_column_slice(q, k_q, &maximize(&f, p0.b.as_slice().to_vec()));
    worst.max(rel(&out.b, &b))
}
