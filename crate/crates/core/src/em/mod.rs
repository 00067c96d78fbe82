//! EM / ECM fitting.

pub mod gaussian;
pub mod robust;
pub mod spatiotemporal;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::basis::BasisSet;
use crate::density::Family;
use crate::engine::{self, Design};
use crate::error::{Error, Result};
use crate::params::{FactorModelParams, RegularizationConfig, Sigma, TvSigma};
use crate::selection::bandwidth::BandwidthSearch;
use crate::weights::{Observations, TimePoints, WeightScheme};

/// Posterior factor moments η̂_n and Ψ̂_n.
#[derive(Debug, Clone, PartialEq)]
pub struct EStepStats {
    pub eta: Vec<DVector<f64>>,
    pub psi: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Number of factors K.
    pub k: usize,
    pub max_iter: usize,
    /// Stop when the relative change of the log joint posterior drops below this.
    pub rel_tol: f64,
    pub seed: u64,
    pub regularization: RegularizationConfig,
    /// Time-varying idiosyncratic variances, using the factor weight scheme
    /// for every coordinate.
    pub tv_sigma: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            k: 1,
            max_iter: 500,
            rel_tol: 1e-6,
            seed: 0,
            regularization: RegularizationConfig::default(),
            tv_sigma: false,
        }
    }
}

impl FitConfig {
    pub fn with_k(k: usize) -> Self {
        Self {
            k,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidInput("K must be at least 1".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidInput("max_iter must be at least 1".into()));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::InvalidInput("rel_tol must be positive".into()));
        }
        self.regularization.validate(self.k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct FitReport {
    /// Log joint posterior at every iterate (initial value first).
    pub trace: Vec<f64>,
    /// Number of M-steps performed.
    pub iterations: usize,
    pub converged: bool,
    /// Bandwidth in force at each trace entry (dynamic selection only).
    pub bandwidth_trace: Vec<f64>,
    /// Points skipped by the last leave-one-out bandwidth evaluation.
    pub skipped_points: usize,
}

impl FitReport {
    pub fn final_objective(&self) -> f64 {
        self.trace.last().copied().unwrap_or(f64::NAN)
    }

    /// Largest relative decrease between consecutive iterates that share a
    /// bandwidth (0 when the trace never decreases).
    pub fn worst_decrease(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 1..self.trace.len() {
            if !self.bandwidth_trace.is_empty()
                && self.bandwidth_trace[i] != self.bandwidth_trace[i - 1]
            {
                continue;
            }
            let (a, b) = (self.trace[i - 1], self.trace[i]);
            worst = worst.max((a - b) / a.abs().max(f64::MIN_POSITIVE));
        }
        worst
    }
}

/// Initial parameters: λ_d = I, Σ = 1, B entries i.i.d. 𝒩(0, 0.001²).
pub fn initial_params(
    q: usize,
    scheme: &WeightScheme,
    config: &FitConfig,
) -> Result<FactorModelParams> {
    let k = config.k;
    let mut rng = crate::rng::stream(config.seed, "init", 0);
    let normal = Normal::new(0.0, 1e-3).expect("valid normal");
    let b = DMatrix::from_fn(q, k, |_, _| normal.sample(&mut rng));
    let sigma = if config.tv_sigma {
        Sigma::TimeVarying(TvSigma::shared(q, scheme, 1.0))
    } else {
        Sigma::Constant(DVector::from_element(q, 1.0))
    };
    FactorModelParams::new(b, sigma, BasisSet::identity(scheme.n_bases(), k), scheme.clone())
}

/// Which blocks the M-step refreshes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Updates {
    All,
    BasisOnly,
}

pub(crate) struct EmOutcome {
    pub params: FactorModelParams,
    pub report: FitReport,
    pub xi2: Option<Vec<f64>>,
}

pub(crate) fn check_inputs(obs: &Observations, times: &TimePoints, params: &FactorModelParams) -> Result<()> {
    obs.check_times(times)?;
    if obs.q() != params.q() {
        return Err(Error::DimensionMismatch(format!(
            "data has Q = {} but the model has Q = {}",
            obs.q(),
            params.q()
        )));
    }
    params.validate()
}

/// The EM / ECM loop shared by the Gaussian and Student-t models.
pub(crate) fn run_em(
    obs: &Observations,
    times: &TimePoints,
    init: FactorModelParams,
    config: &FitConfig,
    family: Family,
    bandwidth: Option<&BandwidthSearch>,
    updates: Updates,
) -> Result<EmOutcome> {
    config.validate()?;
    family.validate()?;
    check_inputs(obs, times, &init)?;
    if obs.n() < 2 {
        return Err(Error::InvalidInput("at least two observations are required".into()));
    }
    let y = obs.y();
    let t = times.as_slice();
    let reg = &config.regularization;
    let mut params = init;
    let mut design = Design::new(t, &params)?;
    let mut report = FitReport::default();
    let mut search = bandwidth.map(|b| b.start(&params.weights));
    let mut prev: Option<f64> = None;
    let mut iter = 0usize;
    loop {
        let mut eval = engine::evaluate(y, &params, &design, family, reg)
            .map_err(|e| e.at_iteration(iter))?;
        let mut changed = false;
        if let (Some(bw), Some(state)) = (bandwidth, search.as_mut()) {
            if iter < config.max_iter {
                let step = bw
                    .step(state, y, t, &params, &eval, family, config.seed, iter)
                    .map_err(|e| e.at_iteration(iter))?;
                if let Some(s) = step.skipped {
                    report.skipped_points = s;
                }
                if let Some(h) = step.new_bandwidth {
                    params.weights = params.weights.with_bandwidth(h)?;
                    design = Design::with_scheme(t, &params.weights, design.noise.take())?;
                    eval = engine::evaluate(y, &params, &design, family, reg)
                        .map_err(|e| e.at_iteration(iter))?;
                    changed = true;
                }
            }
            report.bandwidth_trace.push(params.weights.bandwidth(0));
        }
        let obj = eval.objective();
        report.trace.push(obj);
        if let (Some(p), false) = (prev, changed) {
            if ((obj - p) / p.abs().max(f64::MIN_POSITIVE)).abs() < config.rel_tol {
                report.converged = true;
            }
        }
        prev = Some(obj);
        let xi2 = match family {
            Family::StudentT { nu } => Some(engine::latent_scales(&eval.post.quad, nu, obs.q())),
            Family::Gaussian => None,
        };
        if report.converged || iter >= config.max_iter {
            report.iterations = iter;
            return Ok(EmOutcome {
                params,
                report,
                xi2,
            });
        }
        params = match updates {
            Updates::All => engine::m_step(
                y,
                &params,
                &design,
                &eval.noise,
                &eval.post.eta,
                &eval.post.psi,
                xi2.as_deref(),
                reg,
            ),
            Updates::BasisOnly => {
                let moments = engine::second_moments(&eval.post.eta, &eval.post.psi, xi2.as_deref());
                engine::update_basis(&moments, &design.w, &design.col_sums, reg, params.k()).map(
                    |basis| FactorModelParams {
                        basis,
                        ..params.clone()
                    },
                )
            }
        }
        .map_err(|e| e.at_iteration(iter))?;
        iter += 1;
    }
}
