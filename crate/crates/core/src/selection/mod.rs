//! Bandwidth and factor-count selection.

pub mod bandwidth;
pub mod kfold;

pub use bandwidth::{
    bandwidth_objective, loo_basis_downdate, select_bandwidth, surrogate_factors, BandwidthScore,
    BandwidthSearch, BandwidthSelection, LooBases, LooSampling,
};
pub use kfold::{
    select_k, validation_score, ModelSpec, SchemeTemplate, SelectionResult, Split, SplitMode,
    SplitPlan,
};
