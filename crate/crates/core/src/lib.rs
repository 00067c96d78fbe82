//! Time-varying covariance estimation with Bayesian factor models whose
//! factor covariance is a weighted harmonic average of basis covariances.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod baselines;
pub mod basis;
pub mod density;
pub(crate) mod engine;
pub mod em;
pub mod error;
pub mod forecast;
pub mod identify;
pub mod linalg;
pub mod params;
pub mod rng;
pub mod selection;
pub mod sim;
pub mod weights;

pub use basis::{lambda_at, log_prior_basis, BasisSet};
pub use density::{kl_gaussian, log_density, Family};
pub use em::gaussian::{e_step, fit, fit_dynamic, fit_from, log_joint_posterior, m_step};
pub use em::robust::{e_step_robust, fit_robust, m_step_robust, RobustExtras};
pub use em::spatiotemporal::{
    e_step_st, ecm_step_st, fit_st, MatrixObservations, SpatioTemporalParams, StVariant,
};
pub use em::{EStepStats, FitConfig, FitReport};
pub use error::{Error, Result};
pub use params::{
    marginal_covariance, FactorModelParams, RegularizationConfig, RegularizationMode, Sigma,
    TvSigma,
};
pub use selection::{select_k, BandwidthSearch, ModelSpec, SchemeTemplate, SelectionResult, SplitPlan};
pub use weights::{Observations, TimePoints, WeightScheme};
pub use baselines::{ewma_fit, ewma_select, nadaraya_watson_cov, nonfactor_map, EwmaModel, NonFactorModel};
pub use forecast::{ewma_forecast, run_forecast, ForecastConfig, ForecastResult, ForecastState};
pub use identify::{cosine_similarity, identify, orthonormalize, sparsify, time_varying_loadings, IdentifyConfig};
pub use sim::{average_kl, simulate, NoiseFamily, Simulation, SimulationSpec, Truth};
