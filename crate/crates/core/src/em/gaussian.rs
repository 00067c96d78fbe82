//! Gaussian heteroscedastic factor model (homoscedastic when D = 1).

use nalgebra::DMatrix;

use super::{check_inputs, initial_params, run_em, EStepStats, FitConfig, FitReport, Updates};
use crate::density::Family;
use crate::engine::{self, Design, NoisePrecision};
use crate::error::{Error, Result};
use crate::params::{FactorModelParams, RegularizationConfig, Sigma, TvSigma};
use crate::selection::bandwidth::BandwidthSearch;
use crate::weights::{Observations, TimePoints, WeightScheme};

/// Ψ̂_n = (Λ_{t_n}⁻¹ + BᵀΣ⁻¹B)⁻¹ and η̂_n = Ψ̂_n BᵀΣ⁻¹ y_n.
pub fn e_step(obs: &Observations, times: &TimePoints, params: &FactorModelParams) -> Result<EStepStats> {
    check_inputs(obs, times, params)?;
    let design = Design::new(times.as_slice(), params)?;
    let inv = params.basis.inverses()?;
    let noise = NoisePrecision::new(&params.sigma, &design, obs.n())?;
    let prec = inv.precisions(&design.w);
    let post = engine::posterior_from_precisions(obs.y(), &params.b, &prec, &noise)?;
    Ok(EStepStats {
        eta: post.eta,
        psi: post.psi,
    })
}

pub(crate) fn check_stats(obs: &Observations, stats: &EStepStats) -> Result<usize> {
    if stats.eta.len() != obs.n() || stats.psi.len() != obs.n() {
        return Err(Error::DimensionMismatch(
            "statistics must have one entry per observation".into(),
        ));
    }
    let k = stats.eta.first().map(|e| e.len()).unwrap_or(0);
    if k == 0 || stats.psi.iter().any(|p| p.nrows() != k || p.ncols() != k) {
        return Err(Error::DimensionMismatch("inconsistent factor dimension".into()));
    }
    Ok(k)
}

pub(crate) fn m_step_weighted(
    obs: &Observations,
    times: &TimePoints,
    stats: &EStepStats,
    xi2: Option<&[f64]>,
    scheme: &WeightScheme,
    reg: &RegularizationConfig,
) -> Result<FactorModelParams> {
    obs.check_times(times)?;
    let k = check_stats(obs, stats)?;
    reg.validate(k)?;
    let w = scheme.matrix(times.as_slice())?;
    let sums: Vec<f64> = w.column_iter().map(|c| c.sum()).collect();
    let moments = engine::second_moments(&stats.eta, &stats.psi, xi2);
    let basis = engine::update_basis(&moments, &w, &sums, reg, k)?;
    let (b, sigma) = engine::update_b_sigma(obs.y(), &stats.eta, &moments, xi2)?;
    Ok(FactorModelParams {
        b,
        sigma: Sigma::Constant(sigma),
        basis,
        weights: scheme.clone(),
    })
}

/// Closed-form M-step: bases, then B and constant Σ.
pub fn m_step(
    obs: &Observations,
    times: &TimePoints,
    stats: &EStepStats,
    scheme: &WeightScheme,
    reg: &RegularizationConfig,
) -> Result<FactorModelParams> {
    m_step_weighted(obs, times, stats, None, scheme, reg)
}

/// Conditional updates of B and the basis scalars under time-varying Σ.
/// `params` supplies the previous Σ_t (weighting B's normal equations) and
/// the per-coordinate weight schemes.
pub fn cm_step_tv_sigma(
    obs: &Observations,
    times: &TimePoints,
    stats: &EStepStats,
    params: &FactorModelParams,
) -> Result<(DMatrix<f64>, TvSigma)> {
    check_inputs(obs, times, params)?;
    check_stats(obs, stats)?;
    let Sigma::TimeVarying(tv) = &params.sigma else {
        return Err(Error::InvalidInput("time-varying Sigma is not active".into()));
    };
    let design = Design::new(times.as_slice(), params)?;
    let noise = NoisePrecision::new(&params.sigma, &design, obs.n())?;
    let NoisePrecision::PerPoint(old_prec) = noise else {
        unreachable!("time-varying Sigma yields per-point precisions")
    };
    let moments = engine::second_moments(&stats.eta, &stats.psi, None);
    let b = engine::update_b_tv(obs.y(), &stats.eta, &moments, None, &old_prec)?;
    let resid = engine::residual_moments(obs.y(), &b, &stats.eta, &stats.psi, None);
    let nd = design.noise.as_ref().expect("noise design present");
    let u = engine::update_tv_scalars(&resid, nd, tv)?;
    Ok((b, u))
}

/// Fits from the default initialization with a fixed weight scheme.
pub fn fit(
    obs: &Observations,
    times: &TimePoints,
    scheme: &WeightScheme,
    config: &FitConfig,
) -> Result<(FactorModelParams, FitReport)> {
    config.validate()?;
    let init = initial_params(obs.q(), scheme, config)?;
    fit_from(obs, times, init, config)
}

/// Fits from given initial parameters.
pub fn fit_from(
    obs: &Observations,
    times: &TimePoints,
    init: FactorModelParams,
    config: &FitConfig,
) -> Result<(FactorModelParams, FitReport)> {
    let out = run_em(obs, times, init, config, Family::Gaussian, None, Updates::All)?;
    Ok((out.params, out.report))
}

/// Fits while re-selecting the shared bandwidth during the iterations.
pub fn fit_dynamic(
    obs: &Observations,
    times: &TimePoints,
    scheme: &WeightScheme,
    config: &FitConfig,
    search: &BandwidthSearch,
) -> Result<(FactorModelParams, FitReport)> {
    config.validate()?;
    let init = initial_params(obs.q(), scheme, config)?;
    let out = run_em(obs, times, init, config, Family::Gaussian, Some(search), Updates::All)?;
    Ok((out.params, out.report))
}

/// Σₙ log 𝒩(y_n | 0, BΛ_{t_n}Bᵀ+Σ) + log prior of the bases.
pub fn log_joint_posterior(obs: &Observations, times: &TimePoints, params: &FactorModelParams) -> Result<f64> {
    log_joint_posterior_with(obs, times, params, Family::Gaussian, &RegularizationConfig::default())
}

/// Log joint posterior for either family, including the inverse-Wishart
/// term when that regularization is active.
pub fn log_joint_posterior_with(
    obs: &Observations,
    times: &TimePoints,
    params: &FactorModelParams,
    family: Family,
    reg: &RegularizationConfig,
) -> Result<f64> {
    check_inputs(obs, times, params)?;
    let design = Design::new(times.as_slice(), params)?;
    engine::evaluate(obs.y(), params, &design, family, reg).map(|e| e.objective())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisSet;
    use approx::assert_relative_eq;
    use nalgebra::{dvector, DVector};

    fn scalar_model(b: f64, sigma: f64, lambda: f64) -> FactorModelParams {
        FactorModelParams::new(
            DMatrix::from_element(1, 1, b),
            Sigma::Constant(dvector![sigma]),
            BasisSet::new(vec![DMatrix::from_element(1, 1, lambda)]).unwrap(),
            WeightScheme::homoscedastic(),
        )
        .unwrap()
    }

    #[test]
    fn scalar_e_step() {
        let obs = Observations::new(DMatrix::from_element(1, 1, 2.0)).unwrap();
        let times = TimePoints::regular(1);
        let s = e_step(&obs, &times, &scalar_model(1.0, 1.0, 1.0)).unwrap();
        assert_relative_eq!(s.psi[0][(0, 0)], 0.5, epsilon = 1e-14);
        assert_relative_eq!(s.eta[0][0], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn zero_loadings_and_huge_noise() {
        let obs = Observations::new(DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 0.5, 3.0])).unwrap();
        let times = TimePoints::regular(2);
        let basis = BasisSet::new(vec![
            DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 3.0]),
        ])
        .unwrap();
        let scheme = WeightScheme::new(vec![1.0, 2.0], vec![1.0]).unwrap();
        let p = FactorModelParams::new(
            DMatrix::zeros(2, 2),
            Sigma::Constant(dvector![1.0, 1.0]),
            basis.clone(),
            scheme.clone(),
        )
        .unwrap();
        let s = e_step(&obs, &times, &p).unwrap();
        for n in 0..2 {
            assert_eq!(s.eta[n].norm(), 0.0);
            let lam = p.lambda_at(times.as_slice()[n]).unwrap();
            assert_relative_eq!(s.psi[n], lam, epsilon = 1e-12);
        }
        let noisy = FactorModelParams::new(
            DMatrix::from_element(2, 2, 1.0),
            Sigma::Constant(dvector![1e12, 1e12]),
            basis,
            scheme,
        )
        .unwrap();
        let s = e_step(&obs, &times, &noisy).unwrap();
        for n in 0..2 {
            assert!(s.eta[n].norm() < 1e-10);
            let lam = noisy.lambda_at(times.as_slice()[n]).unwrap();
            assert_relative_eq!(s.psi[n], lam, epsilon = 1e-9);
        }
    }

    #[test]
    fn arithmetic_average_basis() {
        let obs = Observations::new(DMatrix::from_row_slice(2, 1, &[1.0, 2.0])).unwrap();
        let times = TimePoints::regular(2);
        let stats = EStepStats {
            eta: vec![dvector![1.0], dvector![1.0]],
            psi: vec![DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 3.0)],
        };
        let p = m_step(&obs, &times, &stats, &WeightScheme::homoscedastic(), &Default::default())
            .unwrap();
        assert_relative_eq!(p.basis.lambdas[0][(0, 0)], 3.0, epsilon = 1e-14);
    }

    #[test]
    fn strong_inverse_wishart_prior_dominates() {
        let obs = Observations::new(DMatrix::from_row_slice(2, 1, &[1.0, 2.0])).unwrap();
        let times = TimePoints::regular(2);
        let stats = EStepStats {
            eta: vec![dvector![1.0], dvector![5.0]],
            psi: vec![DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 3.0)],
        };
        let theta = DMatrix::from_element(1, 1, 4e9);
        let reg = RegularizationConfig::inverse_wishart(Some(1e9 - 2.0), Some(theta));
        let p = m_step(&obs, &times, &stats, &WeightScheme::homoscedastic(), &reg).unwrap();
        assert_relative_eq!(p.basis.lambdas[0][(0, 0)], 4.0, epsilon = 1e-7);
    }

    #[test]
    fn tv_sigma_single_basis_reduces_to_constant_update() {
        let y = DMatrix::from_row_slice(4, 2, &[1.0, 0.3, -0.5, 1.2, 0.8, -0.4, 0.1, 0.9]);
        let obs = Observations::new(y).unwrap();
        let times = TimePoints::regular(4);
        let stats = EStepStats {
            eta: (0..4).map(|i| dvector![0.3 * i as f64 - 0.4]).collect(),
            psi: (0..4).map(|i| DMatrix::from_element(1, 1, 0.2 + 0.1 * i as f64)).collect(),
        };
        let scheme = WeightScheme::homoscedastic();
        let constant = m_step(&obs, &times, &stats, &scheme, &Default::default()).unwrap();
        let tv = TvSigma {
            scalars: vec![dvector![0.7], dvector![1.9]],
            schemes: vec![scheme.clone(); 2],
        };
        let params = FactorModelParams::new(
            DMatrix::zeros(2, 1),
            Sigma::TimeVarying(tv),
            BasisSet::identity(1, 1),
            scheme,
        )
        .unwrap();
        let (b, u) = cm_step_tv_sigma(&obs, &times, &stats, &params).unwrap();
        assert_relative_eq!(b, constant.b, epsilon = 1e-12);
        let s = constant.sigma.constant().unwrap();
        for q in 0..2 {
            assert_relative_eq!(u.scalars[q][0], s[q], epsilon = 1e-12);
        }
    }

    #[test]
    fn joint_posterior_matches_sum_of_densities() {
        let y = DMatrix::from_row_slice(3, 2, &[1.0, 0.3, -0.5, 1.2, 0.8, -0.4]);
        let obs = Observations::new(y).unwrap();
        let times = TimePoints::regular(3);
        let params = FactorModelParams::new(
            DMatrix::from_row_slice(2, 1, &[0.9, -0.3]),
            Sigma::Constant(dvector![0.5, 0.8]),
            BasisSet::new(vec![
                DMatrix::from_element(1, 1, 1.5),
                DMatrix::from_element(1, 1, 0.4),
            ])
            .unwrap(),
            WeightScheme::new(vec![1.0, 3.0], vec![1.2]).unwrap(),
        )
        .unwrap();
        let mut expect =
            crate::basis::log_prior_basis(&params.basis, &params.weights, &times).unwrap();
        for n in 0..3 {
            let yn: DVector<f64> = obs.row(n);
            expect += crate::density::log_density(&yn, (n + 1) as f64, &params, Family::Gaussian)
                .unwrap();
        }
        let got = log_joint_posterior(&obs, &times, &params).unwrap();
        assert_relative_eq!(got, expect, epsilon = 1e-10);
    }
}
