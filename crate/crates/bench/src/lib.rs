//! Shared fixtures for the criterion benches.

use hetfactor::em::initial_params;
use hetfactor::{simulate, FactorModelParams, FitConfig, Simulation, SimulationSpec, WeightScheme};

/// Simulated data with a default-initialized heteroscedastic model.
pub struct Fixture {
    pub sim: Simulation,
    pub scheme: WeightScheme,
    pub config: FitConfig,
    pub params: FactorModelParams,
}

pub fn fixture(n: usize, q: usize, k: usize) -> Fixture {
    let sim = simulate(&SimulationSpec {
        n,
        q,
        k,
        seed: 7,
        ..SimulationSpec::default()
    })
    .expect("valid simulation");
    let scheme = WeightScheme::at_times(&sim.times, n as f64 / 20.0).expect("positive bandwidth");
    let config = FitConfig::with_k(k);
    let params = initial_params(q, &scheme, &config).expect("valid configuration");
    Fixture {
        sim,
        scheme,
        config,
        params,
    }
}
