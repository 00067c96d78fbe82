//! Student-t (robust) factor model via the scale-mixture augmentation.

use serde::{Deserialize, Serialize};

use super::gaussian::m_step_weighted;
use super::{check_inputs, initial_params, run_em, EStepStats, FitConfig, FitReport, Updates};
use crate::density::Family;
use crate::engine::{self, Design};
use crate::error::{Error, Result};
use crate::params::{FactorModelParams, RegularizationConfig};
use crate::selection::bandwidth::BandwidthSearch;
use crate::weights::{Observations, TimePoints, WeightScheme};

/// Gaussian factor moments plus the latent scale summaries ξ̂_n².
#[derive(Debug, Clone, PartialEq)]
pub struct RobustEStepStats {
    pub stats: EStepStats,
    pub xi2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustExtras {
    pub nu: f64,
    pub xi2: Vec<f64>,
}

fn check_nu(nu: f64) -> Result<()> {
    Family::StudentT { nu }.validate()
}

/// Factor moments as in the Gaussian model and
/// ξ̂_n² = (ν+Q)/(ν + y_nᵀ(BΛ_{t_n}Bᵀ+Σ)⁻¹y_n).
pub fn e_step_robust(
    obs: &Observations,
    times: &TimePoints,
    params: &FactorModelParams,
    nu: f64,
) -> Result<RobustEStepStats> {
    check_nu(nu)?;
    check_inputs(obs, times, params)?;
    let design = Design::new(times.as_slice(), params)?;
    let eval = engine::evaluate(
        obs.y(),
        params,
        &design,
        Family::StudentT { nu },
        &RegularizationConfig::default(),
    )?;
    Ok(RobustEStepStats {
        xi2: engine::latent_scales(&eval.post.quad, nu, obs.q()),
        stats: EStepStats {
            eta: eval.post.eta,
            psi: eval.post.psi,
        },
    })
}

/// M-step with ξ̂²-weighted second moments, normal equations and residuals.
pub fn m_step_robust(
    obs: &Observations,
    times: &TimePoints,
    stats: &RobustEStepStats,
    scheme: &WeightScheme,
    reg: &RegularizationConfig,
) -> Result<FactorModelParams> {
    if stats.xi2.len() != obs.n() {
        return Err(Error::DimensionMismatch("one scale per observation is required".into()));
    }
    if stats.xi2.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(Error::InvalidInput("latent scales must be non-negative".into()));
    }
    m_step_weighted(obs, times, &stats.stats, Some(&stats.xi2), scheme, reg)
}

pub fn fit_robust(
    obs: &Observations,
    times: &TimePoints,
    scheme: &WeightScheme,
    config: &FitConfig,
    nu: f64,
) -> Result<(FactorModelParams, RobustExtras, FitReport)> {
    config.validate()?;
    let init = initial_params(obs.q(), scheme, config)?;
    fit_robust_from(obs, times, init, config, nu)
}

pub fn fit_robust_from(
    obs: &Observations,
    times: &TimePoints,
    init: FactorModelParams,
    config: &FitConfig,
    nu: f64,
) -> Result<(FactorModelParams, RobustExtras, FitReport)> {
    check_nu(nu)?;
    let out = run_em(obs, times, init, config, Family::StudentT { nu }, None, Updates::All)?;
    let xi2 = out.xi2.unwrap_or_default();
    Ok((out.params, RobustExtras { nu, xi2 }, out.report))
}

pub fn fit_robust_dynamic(
    obs: &Observations,
    times: &TimePoints,
    scheme: &WeightScheme,
    config: &FitConfig,
    nu: f64,
    search: &BandwidthSearch,
) -> Result<(FactorModelParams, RobustExtras, FitReport)> {
    check_nu(nu)?;
    config.validate()?;
    let init = initial_params(obs.q(), scheme, config)?;
    let out = run_em(obs, times, init, config, Family::StudentT { nu }, Some(search), Updates::All)?;
    let xi2 = out.xi2.unwrap_or_default();
    Ok((out.params, RobustExtras { nu, xi2 }, out.report))
}
