//! Run settings: a TOML file overlaid by command-line flags.

use std::path::Path;
use std::str::FromStr;

use clap::{Args, ValueEnum};
use hetfactor::selection::SplitMode;
use hetfactor::{
    BandwidthSearch, Family, FitConfig, NoiseFamily, RegularizationConfig, SplitPlan, TimePoints,
};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Gaussian, one basis
    Ghofm,
    /// Gaussian, one basis per time point
    Ghefm,
    /// Student-t, one basis
    Rhofm,
    /// Student-t, one basis per time point
    Rhefm,
    /// Matrix-valued data, joint row/column basis
    StA,
    /// Matrix-valued data, separate row and column bases
    StB,
    /// PCA factors with an exponentially weighted covariance
    Ewma,
    /// Direct Q×Q harmonic-average model
    Nonfactor,
}

impl ModelKind {
    pub fn is_factor(self) -> bool {
        matches!(self, ModelKind::Ghofm | ModelKind::Ghefm | ModelKind::Rhofm | ModelKind::Rhefm)
    }

    pub fn is_heteroscedastic(self) -> bool {
        matches!(self, ModelKind::Ghefm | ModelKind::Rhefm | ModelKind::StA | ModelKind::StB | ModelKind::Nonfactor)
    }

    pub fn is_robust(self) -> bool {
        matches!(self, ModelKind::Rhofm | ModelKind::Rhefm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// `t,<name1>,...,<nameQ>`
    Wide,
    /// `t,p,q,value`
    Long,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum RegKind {
    None,
    Diagonal,
    InverseWishart,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SplitKind {
    Random,
    Blockwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    Gaussian,
    /// Student-t with `nu` degrees of freedom
    T,
}

/// Bandwidth candidates: `auto` or explicit values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridSpec {
    Values(Vec<f64>),
    Named(String),
}

impl FromStr for GridSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.trim() == "auto" {
            return Ok(GridSpec::Named("auto".into()));
        }
        s.split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|e| format!("bad bandwidth `{v}`: {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(GridSpec::Values)
    }
}

/// Every tunable. Absent values fall back to the file, then to the
/// documented default.
#[derive(Debug, Clone, Default, PartialEq, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    /// Model [default: ghefm]
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    /// Number of factors (row factors for the matrix models)
    #[arg(long)]
    pub k: Option<usize>,
    /// Candidate factor counts for `select` [default: 1,...,12]
    #[arg(long, value_delimiter = ',')]
    pub k_candidates: Option<Vec<usize>>,
    /// Column factors of the matrix models [default: 1]
    #[arg(long)]
    pub k_p: Option<usize>,
    /// Starting bandwidth [default: middle of the bandwidth grid]
    #[arg(long)]
    pub h0: Option<f64>,
    /// Bandwidth candidates, `auto` or comma-separated values [default: auto]
    #[arg(long)]
    pub bandwidth_grid: Option<GridSpec>,
    /// Re-select the bandwidth during EM [default: true]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub dynamic_bandwidth: Option<bool>,
    /// Grid steps scored on each side of the current bandwidth [default: whole grid]
    #[arg(long)]
    pub bandwidth_window: Option<usize>,
    /// Stop re-selecting the bandwidth after this many iterations [default: never]
    #[arg(long)]
    pub freeze_after: Option<usize>,
    /// Cross-validation splits [default: random]
    #[arg(long, value_enum)]
    pub split_mode: Option<SplitKind>,
    /// Held-out fraction per split [default: 0.1]
    #[arg(long)]
    pub split_ratio: Option<f64>,
    /// Number of splits [default: 12]
    #[arg(long)]
    pub split_count: Option<usize>,
    /// Degrees of freedom of the Student-t models and t noise [default: 6]
    #[arg(long)]
    pub nu: Option<f64>,
    /// Basis regularization [default: none]
    #[arg(long, value_enum)]
    pub regularization: Option<RegKind>,
    /// Inverse-Wishart degrees of freedom [default: K]
    #[arg(long)]
    pub iw_zeta: Option<f64>,
    /// Time-varying idiosyncratic variances [default: false]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub tv_sigma: Option<bool>,
    /// Clamp each series to ±trim_k standard deviations of the training rows [default: off]
    #[arg(long)]
    pub trim_k: Option<f64>,
    /// Convert prices to log-returns before fitting [default: false]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub log_returns: Option<bool>,
    /// Input layout [default: wide]
    #[arg(long, value_enum)]
    pub layout: Option<Layout>,
    /// Global seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// EM iteration cap [default: 500]
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Relative change of the objective that stops EM [default: 1e-6]
    #[arg(long)]
    pub rel_tol: Option<f64>,
    /// EWMA decays [default: 1.000, 0.999, ..., 0.950]
    #[arg(long, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
    /// Coordinate pairs `a:b` (names or 1-based indices) for plot data [default: 1:2,1:3,1:4]
    #[arg(long, value_delimiter = ',')]
    pub pairs: Option<Vec<String>>,
    /// Points of the time grid in plot data [default: 200]
    #[arg(long)]
    pub plot_points: Option<usize>,
    /// Simulated time points [default: 300]
    #[arg(long)]
    pub n: Option<usize>,
    /// Simulated dimension [default: 130]
    #[arg(long)]
    pub q: Option<usize>,
    /// Simulation kernel exponent: exp(-10^-gamma (t1-t2)^2 / 2) [default: 3]
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Simulated idiosyncratic variance scale [default: 0.25]
    #[arg(long)]
    pub s2: Option<f64>,
    /// Simulated noise [default: gaussian]
    #[arg(long, value_enum)]
    pub noise: Option<NoiseKind>,
    /// Training rows for `forecast` [default: 80% of the rows]
    #[arg(long)]
    pub train: Option<usize>,
    /// Also score the best EWMA decay in hindsight during `forecast` [default: true]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub compare_ewma: Option<bool>,
    /// Relative perturbation of each new basis during `forecast` [default: 0.01]
    #[arg(long)]
    pub perturbation: Option<f64>,
    /// Time at which `similarity` evaluates the loadings [default: B itself]
    #[arg(long)]
    pub at: Option<f64>,
}

macro_rules! overlay {
    ($base:ident, $over:ident; $($f:ident),* $(,)?) => {
        Settings { $($f: $over.$f.or($base.$f)),* }
    };
}

impl Settings {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Values set in `over` win.
    pub fn overlay(self, over: Settings) -> Settings {
        let base = self;
        overlay!(base, over;
            model, k, k_candidates, k_p, h0, bandwidth_grid, dynamic_bandwidth,
            bandwidth_window, freeze_after, split_mode, split_ratio, split_count, nu,
            regularization, iw_zeta, tv_sigma, trim_k, log_returns, layout, seed,
            max_iter, rel_tol, alphas, pairs, plot_points, n, q, gamma, s2, noise,
            train, compare_ewma, perturbation, at,
        )
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        let c = RunConfig {
            model: self.model.unwrap_or(ModelKind::Ghefm),
            k: self.k,
            k_candidates: self.k_candidates.clone().unwrap_or_else(|| (1..=12).collect()),
            k_p: self.k_p.unwrap_or(1),
            h0: self.h0,
            bandwidth_grid: self.bandwidth_grid.clone().unwrap_or(GridSpec::Named("auto".into())),
            dynamic_bandwidth: self.dynamic_bandwidth.unwrap_or(true),
            bandwidth_window: self.bandwidth_window,
            freeze_after: self.freeze_after,
            split_mode: self.split_mode.unwrap_or(SplitKind::Random),
            split_ratio: self.split_ratio.unwrap_or(0.1),
            split_count: self.split_count.unwrap_or(12),
            nu: self.nu.unwrap_or(6.0),
            regularization: self.regularization.unwrap_or(RegKind::None),
            iw_zeta: self.iw_zeta,
            tv_sigma: self.tv_sigma.unwrap_or(false),
            trim_k: self.trim_k,
            log_returns: self.log_returns.unwrap_or(false),
            layout: self.layout.unwrap_or(Layout::Wide),
            seed: self.seed.unwrap_or(0),
            max_iter: self.max_iter.unwrap_or(500),
            rel_tol: self.rel_tol.unwrap_or(1e-6),
            alphas: self.alphas.clone().unwrap_or_else(hetfactor::baselines::default_alpha_grid),
            pairs: self.pairs.clone().unwrap_or_default(),
            plot_points: self.plot_points.unwrap_or(200),
            n: self.n.unwrap_or(300),
            q: self.q.unwrap_or(130),
            gamma: self.gamma.unwrap_or(3.0),
            s2: self.s2.unwrap_or(0.25),
            noise: self.noise.unwrap_or(NoiseKind::Gaussian),
            train: self.train,
            compare_ewma: self.compare_ewma.unwrap_or(true),
            perturbation: self.perturbation.unwrap_or(0.01),
            at: self.at,
        };
        c.validate()?;
        Ok(c)
    }
}

/// Fully resolved settings, echoed into every report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: ModelKind,
    pub k: Option<usize>,
    pub k_candidates: Vec<usize>,
    pub k_p: usize,
    pub h0: Option<f64>,
    pub bandwidth_grid: GridSpec,
    pub dynamic_bandwidth: bool,
    pub bandwidth_window: Option<usize>,
    pub freeze_after: Option<usize>,
    pub split_mode: SplitKind,
    pub split_ratio: f64,
    pub split_count: usize,
    pub nu: f64,
    pub regularization: RegKind,
    pub iw_zeta: Option<f64>,
    pub tv_sigma: bool,
    pub trim_k: Option<f64>,
    pub log_returns: bool,
    pub layout: Layout,
    pub seed: u64,
    pub max_iter: usize,
    pub rel_tol: f64,
    pub alphas: Vec<f64>,
    pub pairs: Vec<String>,
    pub plot_points: usize,
    pub n: usize,
    pub q: usize,
    pub gamma: f64,
    pub s2: f64,
    pub noise: NoiseKind,
    pub train: Option<usize>,
    pub compare_ewma: bool,
    pub perturbation: f64,
    pub at: Option<f64>,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{name} must be positive and finite, got {v}")))
    }
}

impl RunConfig {
    fn validate(&self) -> Result<()> {
        if self.k == Some(0) || self.k_p == 0 {
            return Err(CliError::Config("factor counts must be at least 1".into()));
        }
        if self.k_candidates.is_empty() || self.k_candidates.contains(&0) {
            return Err(CliError::Config("k_candidates must be non-empty and positive".into()));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(CliError::Config(format!("split_ratio must lie in (0, 1), got {}", self.split_ratio)));
        }
        if self.split_count == 0 || self.max_iter == 0 {
            return Err(CliError::Config("split_count and max_iter must be at least 1".into()));
        }
        positive("nu", self.nu)?;
        positive("rel_tol", self.rel_tol)?;
        positive("s2", self.s2)?;
        positive("perturbation", self.perturbation)?;
        for (name, v) in [("h0", self.h0), ("trim_k", self.trim_k), ("iw_zeta", self.iw_zeta)] {
            if let Some(v) = v {
                positive(name, v)?;
            }
        }
        if !self.gamma.is_finite() {
            return Err(CliError::Config("gamma must be finite".into()));
        }
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(CliError::Config("alphas must be a non-empty list in [0, 1]".into()));
        }
        if self.plot_points < 2 {
            return Err(CliError::Config("plot_points must be at least 2".into()));
        }
        if self.n == 0 || self.q == 0 {
            return Err(CliError::Config("n and q must be at least 1".into()));
        }
        if let GridSpec::Named(name) = &self.bandwidth_grid {
            if name != "auto" {
                return Err(CliError::Config(format!("bandwidth_grid must be `auto` or a list, got `{name}`")));
            }
        }
        Ok(())
    }

    pub fn require_k(&self) -> Result<usize> {
        self.k
            .ok_or_else(|| CliError::Config("this command needs --k (or `k` in the config file)".into()))
    }

    pub fn family(&self) -> Family {
        if self.model.is_robust() {
            Family::StudentT { nu: self.nu }
        } else {
            Family::Gaussian
        }
    }

    pub fn noise_family(&self) -> NoiseFamily {
        match self.noise {
            NoiseKind::Gaussian => NoiseFamily::Gaussian,
            NoiseKind::T => NoiseFamily::StudentT { nu: self.nu },
        }
    }

    pub fn fit_config(&self, k: usize) -> FitConfig {
        let regularization = match self.regularization {
            RegKind::None => RegularizationConfig::default(),
            RegKind::Diagonal => RegularizationConfig::diagonal(),
            RegKind::InverseWishart => RegularizationConfig::inverse_wishart(self.iw_zeta, None),
        };
        FitConfig {
            k,
            max_iter: self.max_iter,
            rel_tol: self.rel_tol,
            seed: hetfactor::rng::derive_seed(self.seed, "fit", 0),
            regularization,
            tv_sigma: self.tv_sigma,
        }
    }

    pub fn split_plan(&self) -> SplitPlan {
        SplitPlan {
            mode: match self.split_mode {
                SplitKind::Random => SplitMode::Random,
                SplitKind::Blockwise => SplitMode::Blockwise,
            },
            ratio: self.split_ratio,
            count: self.split_count,
            seed: hetfactor::rng::derive_seed(self.seed, "split", 0),
        }
    }

    pub fn bandwidth_grid(&self, times: &TimePoints) -> Result<Vec<f64>> {
        let search = match &self.bandwidth_grid {
            GridSpec::Values(v) => BandwidthSearch::new(v.clone())?,
            GridSpec::Named(_) => BandwidthSearch::for_times(times)?,
        };
        Ok(search.grid)
    }

    /// Starting bandwidth and, when dynamic, the search around it.
    pub fn bandwidth(&self, times: &TimePoints) -> Result<(f64, Option<BandwidthSearch>)> {
        let grid = self.bandwidth_grid(times)?;
        let h0 = self.h0.unwrap_or(grid[grid.len() / 2]);
        if !self.dynamic_bandwidth {
            return Ok((h0, None));
        }
        let mut search = BandwidthSearch::new(grid)?;
        if let Some(w) = self.bandwidth_window {
            search = search.with_window(w);
        }
        if let Some(f) = self.freeze_after {
            search = search.with_freeze_after(f);
        }
        Ok((h0, Some(search)))
    }
}
