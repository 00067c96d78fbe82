//! Rolling one-step-ahead prediction: predict, score, then renew the basis
//! window and refit the bases only.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::baselines::{pca_loadings, EwmaModel};
use crate::density::{log_density, Family};
use crate::em::{run_em, FitConfig, Updates};
use crate::engine::SIGMA_FLOOR;
use crate::error::{Error, Result};
use crate::linalg;
use crate::params::FactorModelParams;
use crate::weights::{Observations, TimePoints, WeightScheme};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastConfig {
    /// Settings of the basis-only refits.
    pub fit: FitConfig,
    pub family: Family,
    /// Relative size of the multiplicative perturbation of a new basis.
    pub perturbation: f64,
    pub seed: u64,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            fit: FitConfig {
                max_iter: 100,
                ..FitConfig::default()
            },
            family: Family::Gaussian,
            perturbation: 0.01,
            seed: 0,
        }
    }
}

/// Fixed B, Σ, K and bandwidth; rolling bases, centers and data window.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastState {
    pub params: FactorModelParams,
    pub obs: Observations,
    pub times: TimePoints,
    /// Number of completed steps.
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastResult {
    pub times: Vec<f64>,
    /// Predictive log-density of each realized observation.
    pub scores: Vec<f64>,
    pub cumulative: Vec<f64>,
}

impl ForecastResult {
    fn from_scores(times: Vec<f64>, scores: Vec<f64>) -> Self {
        let mut acc = 0.0;
        let cumulative = scores
            .iter()
            .map(|s| {
                acc += s;
                acc
            })
            .collect();
        Self {
            times,
            scores,
            cumulative,
        }
    }
}

impl ForecastState {
    pub fn new(params: FactorModelParams, obs: Observations, times: TimePoints) -> Result<Self> {
        obs.check_times(&times)?;
        params.validate()?;
        if obs.q() != params.q() {
            return Err(Error::DimensionMismatch("data and model disagree on Q".into()));
        }
        Ok(Self {
            params,
            obs,
            times,
            step: 0,
        })
    }

    pub fn last_time(&self) -> f64 {
        *self.times.as_slice().last().expect("non-empty window")
    }

    /// Predictive log-density of `y` at `t` from the current bases.
    pub fn score(&self, y: &DVector<f64>, t: f64, family: Family) -> Result<f64> {
        log_density(y, t, &self.params, family)
    }

    /// Adds a basis at `t` equal to Λ at the last time perturbed by
    /// diag(1 + εz) on both sides, drops the oldest, rolls the data window
    /// and refits the bases with B and Σ frozen.
    pub fn update(&mut self, y: &DVector<f64>, t: f64, config: &ForecastConfig) -> Result<()> {
        if !(t > self.last_time()) {
            return Err(Error::InvalidInput("forecast times must increase".into()));
        }
        if y.len() != self.obs.q() {
            return Err(Error::DimensionMismatch("observation has the wrong length".into()));
        }
        let k = self.params.k();
        let prev = self.params.lambda_at(self.last_time())?;
        let mut rng = crate::rng::stream(config.seed, "forecast-basis", self.step as u64);
        let scale = DVector::from_fn(k, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            1.0 + config.perturbation * z
        });
        let mut fresh = DMatrix::from_fn(k, k, |i, j| prev[(i, j)] * scale[i] * scale[j]);
        linalg::symmetrize(&mut fresh);

        let mut lambdas = self.params.basis.lambdas.clone();
        let mut centers = self.params.weights.centers.clone();
        if lambdas.len() > 1 {
            lambdas.remove(0);
            centers.remove(0);
            centers.push(t);
        } else {
            lambdas.clear();
        }
        lambdas.push(fresh);
        let h = self.params.weights.bandwidths.clone();
        let bandwidths = if h.len() == 1 { h } else { h[1..].iter().chain([&h[h.len() - 1]]).copied().collect() };
        let weights = if centers.len() == 1 {
            self.params.weights.clone()
        } else {
            WeightScheme::new(centers, bandwidths)?
        };

        let n = self.obs.n();
        let mut y_new = DMatrix::zeros(n, self.obs.q());
        y_new.rows_mut(0, n - 1).copy_from(&self.obs.y().rows(1, n - 1));
        y_new.row_mut(n - 1).copy_from(&y.transpose());
        let mut t_new = self.times.as_slice()[1..].to_vec();
        t_new.push(t);
        let obs = Observations::new(y_new)?;
        let times = TimePoints::new(t_new)?;

        let init = FactorModelParams {
            basis: crate::basis::BasisSet { lambdas },
            weights,
            ..self.params.clone()
        };
        let out = run_em(&obs, &times, init, &config.fit, config.family, None, Updates::BasisOnly)?;
        self.params = out.params;
        self.obs = obs;
        self.times = times;
        self.step += 1;
        Ok(())
    }
}

/// Predict, score and update over the test range.
pub fn run_forecast(
    state: &mut ForecastState,
    test_obs: &Observations,
    test_times: &TimePoints,
    config: &ForecastConfig,
) -> Result<ForecastResult> {
    test_obs.check_times(test_times)?;
    let mut scores = Vec::with_capacity(test_obs.n());
    for (i, &t) in test_times.as_slice().iter().enumerate() {
        let y = test_obs.row(i);
        scores.push(state.score(&y, t, config.family)?);
        if i + 1 < test_obs.n() {
            state.update(&y, t, config)?;
        }
    }
    Ok(ForecastResult::from_scores(test_times.as_slice().to_vec(), scores))
}

/// One-step EWMA forecasts with loadings and Σ estimated on the training
/// window; scores of the new observations join the average as they arrive.
pub fn ewma_forecast(
    train: &Observations,
    test: &Observations,
    k: usize,
    alpha: f64,
) -> Result<ForecastResult> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidInput("alpha must lie in [0, 1]".into()));
    }
    if test.q() != train.q() {
        return Err(Error::DimensionMismatch("train and test disagree on Q".into()));
    }
    let w_k = pca_loadings(train.y(), k)?;
    let z_train = train.y() * &w_k;
    let resid = train.y() - &z_train * w_k.transpose();
    let n = train.n();
    let sigma = DVector::from_fn(train.q(), |q, _| {
        (resid.column(q).norm_squared() / n as f64).max(SIGMA_FLOOR)
    });
    let z_all = DMatrix::from_fn(n + test.n(), k, |i, j| {
        if i < n {
            z_train[(i, j)]
        } else {
            test.y().row(i - n).dot(&w_k.column(j).transpose())
        }
    });
    let mut scores = Vec::with_capacity(test.n());
    for i in 0..test.n() {
        let model = EwmaModel {
            w_k: w_k.clone(),
            alpha,
            z: z_all.rows(0, n + i).into_owned(),
            sigma: sigma.clone(),
        };
        scores.push(model.log_density(&test.row(i), (n + i + 1) as f64)?);
    }
    Ok(ForecastResult::from_scores(
        (0..test.n()).map(|i| (n + i + 1) as f64).collect(),
        scores,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::{gaussian, FitConfig};
    use approx::assert_relative_eq;

    fn setup() -> (ForecastState, Observations, TimePoints) {
        let spec = crate::sim::SimulationSpec {
            n: 30,
            q: 6,
            k: 2,
            seed: 3,
            ..Default::default()
        };
        let sim = crate::sim::simulate(&spec).unwrap();
        let train_idx: Vec<usize> = (0..25).collect();
        let test_idx: Vec<usize> = (25..30).collect();
        let (tr, tt) = (sim.obs.subset(&train_idx), sim.times.subset(&train_idx));
        let scheme = WeightScheme::at_times(&tt, 3.0).unwrap();
        let (params, _) = gaussian::fit(&tr, &tt, &scheme, &FitConfig { max_iter: 30, ..FitConfig::with_k(2) }).unwrap();
        (
            ForecastState::new(params, tr, tt).unwrap(),
            sim.obs.subset(&test_idx),
            sim.times.subset(&test_idx),
        )
    }

    #[test]
    fn first_score_is_a_validation_score() {
        let (mut state, test, tt) = setup();
        let expect = log_density(&test.row(0), tt.as_slice()[0], &state.params, Family::Gaussian).unwrap();
        let r = run_forecast(&mut state, &test, &tt, &ForecastConfig::default()).unwrap();
        assert_eq!(r.scores[0], expect);
        assert_eq!(r.scores.len(), 5);
        assert_relative_eq!(r.cumulative[4], r.scores.iter().sum::<f64>(), epsilon = 1e-12);
    }

    #[test]
    fn rolling_keeps_the_basis_count_and_freezes_b_and_sigma() {
        let (mut state, test, tt) = setup();
        let b = state.params.b.clone();
        let sigma = state.params.sigma.clone();
        state.update(&test.row(0), tt.as_slice()[0], &ForecastConfig::default()).unwrap();
        assert_eq!(state.params.basis.len(), 25);
        assert_eq!(state.params.weights.centers[24], tt.as_slice()[0]);
        assert_eq!(state.params.b, b);
        assert_eq!(state.params.sigma, sigma);
        assert_eq!(state.times.as_slice()[0], 2.0);
    }

    #[test]
    fn empty_test_range_gives_no_scores() {
        let (mut state, test, tt) = setup();
        let r = run_forecast(&mut state, &test.subset(&[]), &tt.subset(&[]), &ForecastConfig::default())
            .unwrap();
        assert!(r.scores.is_empty() && r.cumulative.is_empty());
        assert_eq!(state.step, 0);
    }

    #[test]
    fn ewma_forecast_scores_match_direct_density() {
        let (state, test, _) = setup();
        let r = ewma_forecast(&state.obs, &test, 2, 0.95).unwrap();
        let m = crate::baselines::ewma_fit(&state.obs, 2, 0.95).unwrap();
        let direct = m.log_density(&test.row(0), 26.0).unwrap();
        assert_relative_eq!(r.scores[0], direct, epsilon = 1e-9);
    }
}
