//! Leave-one-out bandwidth selection with rank-one downdates of the
//! sampled basis estimates.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{log_pdf_from_parts, Family};
use crate::em::{check_inputs, initial_params, run_em, FitConfig, FitReport, Updates};
use crate::engine::{self, Design, Evaluation, NoisePrecision};
use crate::error::{Error, Result};
use crate::linalg;
use crate::params::{FactorModelParams, RegularizationConfig};
use crate::weights::{Observations, TimePoints, WeightScheme};

/// How the surrogate factor values b̃_n are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum LooSampling {
    /// One draw from 𝒩(η̂_n, Ψ̂_n) per evaluation.
    #[default]
    Draw,
    /// b̃_n = η̂_n.
    Mean,
}

/// Draws (or copies) one surrogate factor vector per observation.
pub fn surrogate_factors(
    eta: &[DVector<f64>],
    psi: &[DMatrix<f64>],
    sampling: LooSampling,
    seed: u64,
    index: u64,
) -> Result<Vec<DVector<f64>>> {
    match sampling {
        LooSampling::Mean => Ok(eta.to_vec()),
        LooSampling::Draw => {
            let mut rng = crate::rng::stream(seed, "loo-draw", index);
            eta.iter()
                .zip(psi)
                .enumerate()
                .map(|(n, (e, p))| {
                    let c = linalg::cholesky(p, &format!("posterior covariance at point {n}"))?;
                    let z = DVector::from_fn(e.len(), |_, _| StandardNormal.sample(&mut rng));
                    Ok(e + c.l() * z)
                })
                .collect()
        }
    }
}

/// Weighted averages λ̃_d of b̃_nb̃_nᵀ with their inverses, ready for
/// leave-one-out downdates.
#[derive(Debug, Clone)]
pub struct LooBases {
    pub lambda: Vec<DMatrix<f64>>,
    inv: Vec<DMatrix<f64>>,
    sums: Vec<f64>,
    w: DMatrix<f64>,
    samples: Vec<DVector<f64>>,
}

const DOWNDATE_EPS: f64 = 1e-12;

impl LooBases {
    /// `w` is the N×D weight matrix of the observation times.
    pub fn new(samples: &[DVector<f64>], w: &DMatrix<f64>) -> Result<Self> {
        if samples.len() != w.nrows() {
            return Err(Error::DimensionMismatch("one sample per weight row".into()));
        }
        if samples.len() < 2 {
            return Err(Error::InvalidInput("at least two observations are required".into()));
        }
        let k = samples[0].len();
        let mut packed = DMatrix::zeros(k * k, samples.len());
        for (n, b) in samples.iter().enumerate() {
            let outer = b * b.transpose();
            packed.column_mut(n).copy_from_slice(outer.as_slice());
        }
        let num = packed * w;
        let sums: Vec<f64> = w.column_iter().map(|c| c.sum()).collect();
        let mut lambda = Vec::with_capacity(w.ncols());
        let mut inv = Vec::with_capacity(w.ncols());
        for d in 0..w.ncols() {
            if !(sums[d] > 0.0) {
                return Err(Error::ZeroBasisWeight { basis: d });
            }
            let mut l = DMatrix::from_column_slice(k, k, num.column(d).as_slice()) / sums[d];
            linalg::symmetrize(&mut l);
            inv.push(linalg::spd_inverse(&l, &format!("sampled basis {d}"))?);
            lambda.push(l);
        }
        Ok(Self {
            lambda,
            inv,
            sums,
            w: w.clone(),
            samples: samples.to_vec(),
        })
    }

    /// (a, c) with λ̃_{d,n} = a(λ̃_d − c b̃_nb̃_nᵀ), or None when the
    /// remaining weight vanishes.
    fn coefficients(&self, d: usize, n: usize) -> Option<(f64, f64)> {
        let s = self.sums[d];
        let om = self.w[(n, d)];
        if s - om <= DOWNDATE_EPS * s {
            return None;
        }
        Some((s / (s - om), om / s))
    }

    /// λ̃_{d,n} formed explicitly.
    pub fn downdated(&self, d: usize, n: usize) -> Option<DMatrix<f64>> {
        let (a, c) = self.coefficients(d, n)?;
        let b = &self.samples[n];
        Some((&self.lambda[d] - b * b.transpose() * c) * a)
    }

    /// λ̃_{d,n}⁻¹ by one Sherman–Morrison downdate of λ̃_d⁻¹; None when the
    /// downdate is not positive definite.
    pub fn downdated_inverse(&self, d: usize, n: usize) -> Option<DMatrix<f64>> {
        let (a, c) = self.coefficients(d, n)?;
        let m = &self.inv[d];
        let u = m * &self.samples[n];
        let denom = 1.0 - c * self.samples[n].dot(&u);
        if denom <= DOWNDATE_EPS {
            return None;
        }
        let mut out = (m + &u * u.transpose() * (c / denom)) / a;
        linalg::symmetrize(&mut out);
        Some(out)
    }

    /// Σ_d ω_d(t_n) λ̃_{d,n}⁻¹, or None when any positively weighted
    /// downdate fails.
    fn loo_precision(&self, n: usize) -> Option<DMatrix<f64>> {
        let k = self.samples[n].len();
        let b = &self.samples[n];
        let mut p = DMatrix::zeros(k, k);
        for d in 0..self.inv.len() {
            let om = self.w[(n, d)];
            if om == 0.0 {
                continue;
            }
            let (a, c) = self.coefficients(d, n)?;
            let m = &self.inv[d];
            let u = m * b;
            let denom = 1.0 - c * b.dot(&u);
            if denom <= DOWNDATE_EPS {
                return None;
            }
            p += m * (om / a);
            p.ger(om * c / (a * denom), &u, &u, 1.0);
        }
        linalg::symmetrize(&mut p);
        Some(p)
    }
}

/// Downdated inverses λ̃_{d,n}⁻¹ for every basis d (None where the
/// downdate is not positive definite).
pub fn loo_basis_downdate(
    samples: &[DVector<f64>],
    times: &TimePoints,
    scheme: &WeightScheme,
    n: usize,
) -> Result<Vec<Option<DMatrix<f64>>>> {
    if n >= times.len() {
        return Err(Error::InvalidInput(format!("point {n} is out of range")));
    }
    let w = scheme.matrix(times.as_slice())?;
    let bases = LooBases::new(samples, &w)?;
    Ok((0..w.ncols()).map(|d| bases.downdated_inverse(d, n)).collect())
}

/// Leave-one-out score of one candidate bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandwidthScore {
    pub h0: f64,
    /// Sum of the held-out log-densities over the points that were used.
    pub total: f64,
    pub used: usize,
    pub skipped: usize,
}

impl BandwidthScore {
    /// Mean held-out log-density (−∞ when every point was skipped).
    pub fn mean(&self) -> f64 {
        if self.used == 0 {
            f64::NEG_INFINITY
        } else {
            self.total / self.used as f64
        }
    }
}

fn infeasible(h0: f64, n: usize) -> BandwidthScore {
    BandwidthScore {
        h0,
        total: f64::NEG_INFINITY,
        used: 0,
        skipped: n,
    }
}

fn score_candidate(
    y: &DMatrix<f64>,
    times: &[f64],
    params: &FactorModelParams,
    noise: &NoisePrecision,
    samples: &[DVector<f64>],
    h0: f64,
    family: Family,
) -> Result<BandwidthScore> {
    let n_obs = y.nrows();
    let scheme = params.weights.with_bandwidth(h0)?;
    let w = match scheme.matrix(times) {
        Ok(w) => w,
        Err(Error::DegenerateWeights { .. }) => return Ok(infeasible(h0, n_obs)),
        Err(e) => return Err(e),
    };
    let bases = match LooBases::new(samples, &w) {
        Ok(b) => b,
        Err(e) if e.is_numeric() => return Ok(infeasible(h0, n_obs)),
        Err(e) => return Err(e),
    };
    let b = &params.b;
    let q = y.ncols();
    let parts: Vec<Option<f64>> = (0..n_obs)
        .into_par_iter()
        .map(|n| {
            let p = bases.loo_precision(n)?;
            let s = noise.column(n);
            let mut bs = b.clone();
            for (i, mut row) in bs.row_iter_mut().enumerate() {
                row *= s[i];
            }
            let yn = y.row(n).transpose();
            let h = bs.transpose() * &yn;
            let cp = p.clone().cholesky()?;
            let ca = (p + b.transpose() * &bs).cholesky()?;
            let ld_p = 2.0 * cp.l().diagonal().map(f64::ln).sum();
            let ld_a = 2.0 * ca.l().diagonal().map(f64::ln).sum();
            let ld_sigma = -s.iter().map(|v| v.ln()).sum::<f64>();
            let yy: f64 = yn.iter().zip(s.iter()).map(|(v, p)| v * v * p).sum();
            let quad = (yy - h.dot(&ca.solve(&h))).max(0.0);
            let v = log_pdf_from_parts(family, q, ld_sigma - ld_p + ld_a, quad);
            v.is_finite().then_some(v)
        })
        .collect();
    let mut score = BandwidthScore {
        h0,
        total: 0.0,
        used: 0,
        skipped: 0,
    };
    for v in parts {
        match v {
            Some(v) => {
                score.total += v;
                score.used += 1;
            }
            None => score.skipped += 1,
        }
    }
    Ok(score)
}

/// Held-out criterion of one candidate bandwidth at the given parameters,
/// with the surrogate factors derived from their posterior.
pub fn bandwidth_objective(
    obs: &Observations,
    times: &TimePoints,
    params: &FactorModelParams,
    h0: f64,
    family: Family,
    sampling: LooSampling,
    seed: u64,
) -> Result<BandwidthScore> {
    if !(h0 > 0.0 && h0.is_finite()) {
        return Err(Error::InvalidInput("candidate bandwidth must be positive".into()));
    }
    check_inputs(obs, times, params)?;
    if obs.n() < 2 {
        return Err(Error::InvalidInput("at least two observations are required".into()));
    }
    let design = Design::new(times.as_slice(), params)?;
    let eval = engine::evaluate(obs.y(), params, &design, family, &RegularizationConfig::default())?;
    let samples = surrogate_factors(&eval.post.eta, &eval.post.psi, sampling, seed, 0)?;
    score_candidate(obs.y(), times.as_slice(), params, &eval.noise, &samples, h0, family)
}

/// Index of the best score; ties go to the earliest (smallest) candidate.
fn best_index(scores: &[BandwidthScore]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        let m = s.mean();
        if !m.is_finite() {
            continue;
        }
        if best.is_none_or(|b| m > scores[b].mean()) {
            best = Some(i);
        }
    }
    best
}

/// Per-iteration bandwidth re-selection inside EM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthSearch {
    /// Candidates, sorted ascending.
    pub grid: Vec<f64>,
    /// Only candidates within this many grid steps of the current one are
    /// scored (all of them when None).
    pub window: Option<usize>,
    /// Stop re-selecting after this many iterations.
    pub freeze_after: Option<usize>,
    pub sampling: LooSampling,
}

pub(crate) struct SearchState {
    pos: usize,
}

pub(crate) struct SearchStep {
    pub skipped: Option<usize>,
    pub new_bandwidth: Option<f64>,
}

impl BandwidthSearch {
    pub fn new(mut grid: Vec<f64>) -> Result<Self> {
        if grid.is_empty() {
            return Err(Error::InvalidInput("bandwidth grid must be non-empty".into()));
        }
        if grid.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
            return Err(Error::InvalidInput("bandwidth candidates must be positive".into()));
        }
        grid.sort_by(f64::total_cmp);
        grid.dedup();
        Ok(Self {
            grid,
            window: None,
            freeze_after: None,
            sampling: LooSampling::Draw,
        })
    }

    /// The default log-spaced grid for these time points.
    pub fn for_times(times: &TimePoints) -> Result<Self> {
        Self::new(crate::weights::default_bandwidth_grid(times))
    }

    pub fn with_window(mut self, window: usize) -> Self {
        self.window = Some(window);
        self
    }

    pub fn with_freeze_after(mut self, iterations: usize) -> Self {
        self.freeze_after = Some(iterations);
        self
    }

    pub fn with_sampling(mut self, sampling: LooSampling) -> Self {
        self.sampling = sampling;
        self
    }

    fn nearest(&self, h: f64) -> usize {
        let mut best = 0;
        for (i, g) in self.grid.iter().enumerate() {
            if (g.ln() - h.ln()).abs() < (self.grid[best].ln() - h.ln()).abs() {
                best = i;
            }
        }
        best
    }

    pub(crate) fn start(&self, scheme: &WeightScheme) -> SearchState {
        SearchState {
            pos: self.nearest(scheme.bandwidth(0)),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn step(
        &self,
        state: &mut SearchState,
        y: &DMatrix<f64>,
        times: &[f64],
        params: &FactorModelParams,
        eval: &Evaluation,
        family: Family,
        seed: u64,
        iter: usize,
    ) -> Result<SearchStep> {
        if params.weights.n_bases() == 1 || self.freeze_after.is_some_and(|f| iter >= f) {
            return Ok(SearchStep {
                skipped: None,
                new_bandwidth: None,
            });
        }
        let (lo, hi) = match self.window {
            Some(w) => (
                state.pos.saturating_sub(w),
                (state.pos + w).min(self.grid.len() - 1),
            ),
            None => (0, self.grid.len() - 1),
        };
        let samples = surrogate_factors(&eval.post.eta, &eval.post.psi, self.sampling, seed, iter as u64)?;
        let scores = self.grid[lo..=hi]
            .iter()
            .map(|&h| score_candidate(y, times, params, &eval.noise, &samples, h, family))
            .collect::<Result<Vec<_>>>()?;
        let Some(best) = best_index(&scores) else {
            return Ok(SearchStep {
                skipped: Some(y.nrows()),
                new_bandwidth: None,
            });
        };
        state.pos = lo + best;
        let h = self.grid[state.pos];
        Ok(SearchStep {
            skipped: Some(scores[best].skipped),
            new_bandwidth: (h != params.weights.bandwidth(0) || params.weights.bandwidths.len() != 1)
                .then_some(h),
        })
    }
}

/// Outcome of bandwidth selection together with the fit at the chosen value.
#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthSelection {
    pub h_hat: f64,
    /// Candidate scores (static mode only).
    pub scores: Vec<BandwidthScore>,
    pub params: FactorModelParams,
    pub report: FitReport,
}

/// Static mode fits once per candidate and keeps the best held-out score;
/// dynamic mode re-selects from the grid at every EM iteration.
pub fn select_bandwidth(
    obs: &Observations,
    times: &TimePoints,
    scheme: &WeightScheme,
    config: &FitConfig,
    family: Family,
    search: &BandwidthSearch,
    dynamic: bool,
) -> Result<BandwidthSelection> {
    config.validate()?;
    if dynamic {
        let init = initial_params(obs.q(), scheme, config)?;
        let out = run_em(obs, times, init, config, family, Some(search), Updates::All)?;
        return Ok(BandwidthSelection {
            h_hat: out.params.weights.bandwidth(0),
            scores: Vec::new(),
            params: out.params,
            report: out.report,
        });
    }
    let mut fits = Vec::with_capacity(search.grid.len());
    let mut scores = Vec::with_capacity(search.grid.len());
    for (i, &h) in search.grid.iter().enumerate() {
        let s = scheme.with_bandwidth(h)?;
        let init = initial_params(obs.q(), &s, config)?;
        let out = match run_em(obs, times, init, config, family, None, Updates::All) {
            Ok(out) => out,
            Err(e) if e.is_numeric() => {
                scores.push(infeasible(h, obs.n()));
                fits.push(None);
                continue;
            }
            Err(e) => return Err(e),
        };
        let score = bandwidth_objective(obs, times, &out.params, h, family, search.sampling, crate::rng::derive_seed(config.seed, "bandwidth", i as u64))
            .or_else(|e| if e.is_numeric() { Ok(infeasible(h, obs.n())) } else { Err(e) })?;
        scores.push(score);
        fits.push(Some(out));
    }
    let best = best_index(&scores).ok_or_else(|| Error::NonFinite {
        context: "every bandwidth candidate failed".into(),
    })?;
    let out = fits[best].take().expect("scored candidates have fits");
    Ok(BandwidthSelection {
        h_hat: search.grid[best],
        scores,
        params: out.params,
        report: out.report,
    })
}
