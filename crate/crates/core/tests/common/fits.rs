//! Small random fits of every model variant, for trace checks.

use hetfactor::em::spatiotemporal::fit_st;
use hetfactor::{
    fit, fit_robust, simulate, FitConfig, MatrixObservations, NoiseFamily, RegularizationConfig,
    SimulationSpec, StVariant, TimePoints, WeightScheme,
};
use rand::Rng;

use super::{normal_matrix, rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Homoscedastic,
    Heteroscedastic,
    Diagonal,
    InverseWishart,
    TvSigma,
    Robust,
    JointBasis,
    SeparableBases,
}

pub const ALL: [Variant; 8] = [
    Variant::Homoscedastic,
    Variant::Heteroscedastic,
    Variant::Diagonal,
    Variant::InverseWishart,
    Variant::TvSigma,
    Variant::Robust,
    Variant::JointBasis,
    Variant::SeparableBases,
];

/// Objective trace of one random fit.
pub fn trace(variant: Variant, seed: u64) -> Vec<f64> {
    let mut r = rng(seed ^ 0xfeed);
    let n = r.random_range(20..=40);
    let h = r.random_range(2.0..15.0);
    let mut config = FitConfig {
        k: r.random_range(1..=3),
        max_iter: 60,
        rel_tol: 1e-12,
        seed,
        ..FitConfig::default()
    };
    let times = TimePoints::regular(n);
    let scheme = WeightScheme::at_times(&times, h).unwrap();
    if matches!(variant, Variant::JointBasis | Variant::SeparableBases) {
        let (q, p) = (4, 3);
        let obs = MatrixObservations::new((0..n).map(|_| normal_matrix(&mut r, q, p)).collect()).unwrap();
        let k_p = r.random_range(1..=2);
        config.k = r.random_range(1..=2);
        let v = if variant == Variant::JointBasis { StVariant::A } else { StVariant::B };
        let rho = WeightScheme::at_times(&times, h * 1.5).unwrap();
        return fit_st(&obs, &times, &scheme, Some(&rho), k_p, &config, v).unwrap().1.trace;
    }
    let noise = if variant == Variant::Robust {
        NoiseFamily::StudentT { nu: 4.0 }
    } else {
        NoiseFamily::Gaussian
    };
    let sim = simulate(&SimulationSpec {
        n,
        q: r.random_range(4..=8),
        k: 2,
        gamma: r.random_range(2.0..4.0),
        s2: r.random_range(0.2..1.0),
        noise,
        seed,
    })
    .unwrap();
    let scheme = match variant {
        Variant::Homoscedastic => WeightScheme::homoscedastic(),
        _ => scheme,
    };
    match variant {
        Variant::Diagonal => config.regularization = RegularizationConfig::diagonal(),
        Variant::InverseWishart => {
            config.regularization = RegularizationConfig::inverse_wishart(Some(config.k as f64), None)
        }
        Variant::TvSigma => config.tv_sigma = true,
        _ => {}
    }
    if variant == Variant::Robust {
        return fit_robust(&sim.obs, &sim.times, &scheme, &config, 4.0).unwrap().2.trace;
    }
    fit(&sim.obs, &sim.times, &scheme, &config).unwrap().1.trace
}

/// Largest relative decrease between consecutive trace entries.
pub fn worst_drop(trace: &[f64]) -> f64 {
    trace
        .windows(2)
        .map(|w| (w[0] - w[1]) / w[0].abs())
        .fold(f64::NEG_INFINITY, f64::max)
}
