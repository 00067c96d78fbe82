//! Synthetic heteroscedastic factor data and KL scoring against the truth.

use nalgebra::{DMatrix, DVector};
use rand_distr::{ChiSquared, Distribution, Normal, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::kl_gaussian;
use crate::error::{Error, Result};
use crate::linalg;
use crate::weights::{Observations, TimePoints};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NoiseFamily {
    Gaussian,
    StudentT { nu: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub n: usize,
    pub q: usize,
    pub k: usize,
    /// Kernel exp(−½·10^{−γ}(t₁−t₂)²).
    pub gamma: f64,
    /// Scale of the idiosyncratic variances, drawn from U(0.5s², 1.5s²).
    pub s2: f64,
    pub noise: NoiseFamily,
    pub seed: u64,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        Self {
            n: 300,
            q: 130,
            k: 5,
            gamma: 3.0,
            s2: 0.25,
            noise: NoiseFamily::Gaussian,
            seed: 0,
        }
    }
}

impl SimulationSpec {
    /// The 12 (γ, s²) combinations of γ ∈ {3,4,5} and s² ∈ {0.25,0.5,1,2}.
    pub fn grid() -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(12);
        for gamma in [3.0, 4.0, 5.0] {
            for s2 in [0.25, 0.5, 1.0, 2.0] {
                out.push((gamma, s2));
            }
        }
        out
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.q == 0 || self.k == 0 || self.k > self.q {
            return Err(Error::InvalidInput("need N, Q >= 1 and 1 <= K <= Q".into()));
        }
        if !(self.gamma.is_finite() && self.s2 > 0.0 && self.s2.is_finite()) {
            return Err(Error::InvalidInput("gamma must be finite and s2 positive".into()));
        }
        if let NoiseFamily::StudentT { nu } = self.noise {
            if !(nu > 0.0 && nu.is_finite()) {
                return Err(Error::InvalidInput("degrees of freedom must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Generating parameters. `lambda[n]` is the factor covariance at t_n.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub b: DMatrix<f64>,
    pub sigma: DVector<f64>,
    pub lambda: Vec<DMatrix<f64>>,
}

impl Truth {
    /// BΛ(t_n)Bᵀ + Σ (the scale matrix for Student-t noise).
    pub fn covariance(&self, n: usize) -> DMatrix<f64> {
        let mut c = &self.b * &self.lambda[n] * self.b.transpose();
        for i in 0..c.nrows() {
            c[(i, i)] += self.sigma[i];
        }
        linalg::symmetrize(&mut c);
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub times: TimePoints,
    pub obs: Observations,
    pub truth: Truth,
}

/// Block-diagonal Q×K loadings: K contiguous blocks of ⌊Q/K⌋ rows, the
/// remainder appended to the last one.
pub fn block_pattern(q: usize, k: usize) -> Vec<usize> {
    let size = q / k;
    (0..q).map(|i| (i / size.max(1)).min(k - 1)).collect()
}

/// N×K² matrix whose columns are independent GP paths on t = 1..N.
fn gp_paths(spec: &SimulationSpec) -> Result<DMatrix<f64>> {
    let (n, k) = (spec.n, spec.k);
    let scale = 0.5 * 10f64.powf(-spec.gamma);
    let mut gram = DMatrix::from_fn(n, n, |i, j| {
        let d = i as f64 - j as f64;
        (-scale * d * d).exp()
    });
    for i in 0..n {
        gram[(i, i)] += 1e-10;
    }
    let chol = linalg::cholesky(&gram, "Gaussian process Gram matrix")?;
    let mut rng = crate::rng::stream(spec.seed, "gp", 0);
    let z = DMatrix::from_fn(n, k * k, |_, _| StandardNormal.sample(&mut rng));
    Ok(chol.l() * z)
}

/// corr(R(t_n)R(t_n)ᵀ) per point, with R filled row-wise from the GP paths.
fn gp_correlations(spec: &SimulationSpec) -> Result<Vec<DMatrix<f64>>> {
    let k = spec.k;
    let paths = gp_paths(spec)?;
    Ok((0..spec.n)
        .map(|t| {
            let r = DMatrix::from_row_slice(k, k, paths.row(t).transpose().as_slice());
            let m = &r * r.transpose();
            let mut c = DMatrix::from_fn(k, k, |i, j| m[(i, j)] / (m[(i, i)] * m[(j, j)]).sqrt());
            c.fill_diagonal(1.0);
            linalg::symmetrize(&mut c);
            c
        })
        .collect())
}

pub fn simulate(spec: &SimulationSpec) -> Result<Simulation> {
    spec.validate()?;
    let (n, q, k) = (spec.n, spec.q, spec.k);
    let lambda = gp_correlations(spec)?;

    let pattern = block_pattern(q, k);
    let mut rng = crate::rng::stream(spec.seed, "loadings", 0);
    let load = Normal::new(1.0, 0.1).expect("valid normal");
    let b = DMatrix::from_fn(q, k, |i, j| if pattern[i] == j { load.sample(&mut rng) } else { 0.0 });

    let mut rng = crate::rng::stream(spec.seed, "noise-variance", 0);
    let unif = Uniform::new(0.5 * spec.s2, 1.5 * spec.s2).expect("valid range");
    let sigma = DVector::from_fn(q, |_, _| unif.sample(&mut rng));

    let mut rng = crate::rng::stream(spec.seed, "observations", 0);
    let chi = match spec.noise {
        NoiseFamily::StudentT { nu } => Some((nu, ChiSquared::new(nu).expect("positive dof"))),
        NoiseFamily::Gaussian => None,
    };
    let mut y = DMatrix::zeros(n, q);
    for t in 0..n {
        let lc = linalg::cholesky(&lambda[t], "factor correlation")?;
        let zf = DVector::from_fn(k, |_, _| StandardNormal.sample(&mut rng));
        let ze = DVector::from_fn(q, |_, _| StandardNormal.sample(&mut rng));
        let mut row = &b * (lc.l() * zf) + ze.component_mul(&sigma.map(f64::sqrt));
        if let Some((nu, dist)) = &chi {
            let w: f64 = dist.sample(&mut rng);
            row *= (nu / w).sqrt();
        }
        y.row_mut(t).copy_from(&row.transpose());
    }
    Ok(Simulation {
        times: TimePoints::regular(n),
        obs: Observations::new(y)?,
        truth: Truth { b, sigma, lambda },
    })
}

/// (1/N) Σₙ KL(𝒩(0, truth_n) ‖ 𝒩(0, model_n)).
pub fn average_kl<F>(truth: &Truth, model_cov: F) -> Result<f64>
where
    F: Fn(usize) -> Result<DMatrix<f64>> + Sync,
{
    let n = truth.lambda.len();
    if n == 0 {
        return Err(Error::InvalidInput("truth has no time points".into()));
    }
    let q = truth.b.nrows();
    let zero = DVector::zeros(q);
    let parts: Vec<Result<f64>> = (0..n)
        .into_par_iter()
        .map(|i| kl_gaussian(&zero, &truth.covariance(i), &zero, &model_cov(i)?))
        .collect();
    Ok(parts.into_iter().sum::<Result<f64>>()? / n as f64)
}
