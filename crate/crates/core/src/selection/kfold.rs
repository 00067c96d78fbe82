//! Factor-count selection by repeated train/validation splits.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bandwidth::BandwidthSearch;
use crate::density::{log_density, Family};
use crate::em::{initial_params, run_em, FitConfig, FitReport, Updates};
use crate::error::{Error, Result};
use crate::params::FactorModelParams;
use crate::weights::{Observations, TimePoints, WeightScheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitMode {
    Random,
    /// One contiguous validation block per split at rotating offsets.
    Blockwise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub mode: SplitMode,
    /// Fraction of points held out.
    pub ratio: f64,
    pub count: usize,
    pub seed: u64,
}

impl Default for SplitPlan {
    fn default() -> Self {
        Self {
            mode: SplitMode::Random,
            ratio: 0.1,
            count: 12,
            seed: 0,
        }
    }
}

/// Training and validation indices of one split (both ascending).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

impl SplitPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::InvalidInput("split ratio must lie in (0, 1)".into()));
        }
        if self.count == 0 {
            return Err(Error::InvalidInput("at least one split is required".into()));
        }
        Ok(())
    }

    /// Deterministic splits of `n` points.
    pub fn splits(&self, n: usize) -> Result<Vec<Split>> {
        self.validate()?;
        let m = ((self.ratio * n as f64).round() as usize).max(1);
        if n < m + 2 {
            return Err(Error::InvalidInput(format!(
                "{n} points are too few for a validation fraction of {}",
                self.ratio
            )));
        }
        let make = |mut validation: Vec<usize>| {
            validation.sort_unstable();
            let train = (0..n).filter(|i| validation.binary_search(i).is_err()).collect();
            Split { train, validation }
        };
        Ok((0..self.count)
            .map(|s| match self.mode {
                SplitMode::Random => {
                    let mut idx: Vec<usize> = (0..n).collect();
                    idx.shuffle(&mut crate::rng::stream(self.seed, "split", s as u64));
                    make(idx[..m].to_vec())
                }
                SplitMode::Blockwise => {
                    let span = n - m;
                    let start = if self.count == 1 {
                        0
                    } else {
                        (s * span + (self.count - 1) / 2) / (self.count - 1)
                    };
                    make((start..start + m).collect())
                }
            })
            .collect())
    }
}

/// Σ over held-out points of the model log-density (0 for an empty set).
pub fn validation_score(
    obs: &Observations,
    times: &TimePoints,
    params: &FactorModelParams,
    family: Family,
) -> Result<f64> {
    if obs.n() != times.len() {
        return Err(Error::DimensionMismatch("one time point per observation".into()));
    }
    let mut total = 0.0;
    for (n, &t) in times.as_slice().iter().enumerate() {
        total += log_density(&obs.row(n), t, params, family)?;
    }
    Ok(total)
}

/// How the weight scheme is built for a given set of training times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SchemeTemplate {
    /// One basis.
    Homoscedastic,
    /// One center per training time with a shared bandwidth.
    AtTimes { h0: f64 },
    Fixed(WeightScheme),
}

impl SchemeTemplate {
    pub fn build(&self, times: &TimePoints) -> Result<WeightScheme> {
        match self {
            SchemeTemplate::Homoscedastic => Ok(WeightScheme::homoscedastic()),
            SchemeTemplate::AtTimes { h0 } => WeightScheme::at_times(times, *h0),
            SchemeTemplate::Fixed(s) => Ok(s.clone()),
        }
    }
}

/// Everything except K that defines one model fit.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub fit: FitConfig,
    pub family: Family,
    pub scheme: SchemeTemplate,
    /// Dynamic bandwidth re-selection during EM.
    pub bandwidth: Option<BandwidthSearch>,
}

impl ModelSpec {
    /// Fits with K factors; `job` decorrelates initializations across jobs.
    pub fn fit_k(
        &self,
        obs: &Observations,
        times: &TimePoints,
        k: usize,
        job: u64,
    ) -> Result<(FactorModelParams, FitReport)> {
        let mut config = self.fit.clone();
        config.k = k;
        config.seed = crate::rng::derive_seed(self.fit.seed, "fit", job);
        config.validate()?;
        let scheme = self.scheme.build(times)?;
        let init = initial_params(obs.q(), &scheme, &config)?;
        let out = run_em(
            obs,
            times,
            init,
            &config,
            self.family,
            self.bandwidth.as_ref(),
            Updates::All,
        )?;
        Ok((out.params, out.report))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub k_hat: usize,
    /// Bandwidth of the final fit (None for a single basis).
    pub h_hat: Option<f64>,
    /// (K, 𝒱(K)) for every K with at least one successful split.
    pub v_table: Vec<(usize, f64)>,
    /// Validation score per K candidate and split (None where the fit failed).
    pub split_scores: Vec<(usize, Vec<Option<f64>>)>,
    pub params: FactorModelParams,
    pub report: FitReport,
}

fn job_id(k: usize, split: usize) -> u64 {
    ((k as u64) << 32) | split as u64
}

/// Cross-validated choice of K followed by a refit on all data.
pub fn select_k(
    obs: &Observations,
    times: &TimePoints,
    candidates: &[usize],
    plan: &SplitPlan,
    spec: &ModelSpec,
) -> Result<SelectionResult> {
    if candidates.is_empty() || candidates.contains(&0) {
        return Err(Error::InvalidInput("K candidates must be non-empty and positive".into()));
    }
    if obs.n() != times.len() {
        return Err(Error::DimensionMismatch("one time point per observation".into()));
    }
    let mut ks = candidates.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let splits = plan.splits(obs.n())?;
    let jobs: Vec<(usize, usize)> = ks
        .iter()
        .flat_map(|&k| (0..splits.len()).map(move |s| (k, s)))
        .collect();
    let results: Vec<Result<Option<f64>>> = jobs
        .par_iter()
        .map(|&(k, s)| {
            let sp = &splits[s];
            let (tr_obs, tr_t) = (obs.subset(&sp.train), times.subset(&sp.train));
            let (va_obs, va_t) = (obs.subset(&sp.validation), times.subset(&sp.validation));
            let fitted = spec
                .fit_k(&tr_obs, &tr_t, k, job_id(k, s))
                .and_then(|(p, _)| validation_score(&va_obs, &va_t, &p, spec.family));
            match fitted {
                Ok(v) if v.is_finite() => Ok(Some(v)),
                Ok(_) => Ok(None),
                Err(e) if e.is_numeric() => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut split_scores: Vec<(usize, Vec<Option<f64>>)> =
        ks.iter().map(|&k| (k, Vec::with_capacity(splits.len()))).collect();
    for ((k, _), r) in jobs.iter().zip(results) {
        let i = ks.binary_search(k).expect("k from candidates");
        split_scores[i].1.push(r?);
    }
    let v_table: Vec<(usize, f64)> = split_scores
        .iter()
        .filter_map(|(k, v)| {
            let ok: Vec<f64> = v.iter().flatten().copied().collect();
            (!ok.is_empty()).then(|| (*k, ok.iter().sum::<f64>() / ok.len() as f64))
        })
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for &(k, v) in &v_table {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((k, v));
        }
    }
    let Some((k_hat, _)) = best else {
        return Err(Error::AllSplitsFailed { k: ks[0] });
    };
    let (params, report) = spec.fit_k(obs, times, k_hat, job_id(k_hat, usize::MAX >> 32))?;
    let h_hat = (params.weights.n_bases() > 1).then(|| params.weights.bandwidth(0));
    Ok(SelectionResult {
        k_hat,
        h_hat,
        v_table,
        split_scores,
        params,
        report,
    })
}
