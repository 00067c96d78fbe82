//! Time points, observations and kernel weight functions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kernel values below this threshold count as underflow.
pub const KERNEL_FLOOR: f64 = 1e-300;

/// Strictly increasing, finite time indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimePoints(Vec<f64>);

impl TimePoints {
    pub fn new(t: Vec<f64>) -> Result<Self> {
        if t.is_empty() {
            return Err(Error::InvalidInput("time points must be non-empty".into()));
        }
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("time points must be finite".into()));
        }
        if t.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput(
                "time points must be strictly increasing".into(),
            ));
        }
        Ok(Self(t))
    }

    /// `1, 2, ..., n`.
    pub fn regular(n: usize) -> Self {
        Self((1..=n).map(|i| i as f64).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self(idx.iter().map(|&i| self.0[i]).collect())
    }

    /// Smallest gap between consecutive times (`None` when N = 1).
    pub fn min_gap(&self) -> Option<f64> {
        self.0
            .windows(2)
            .map(|w| w[1] - w[0])
            .min_by(|a, b| a.total_cmp(b))
    }

    pub fn range(&self) -> f64 {
        self.0[self.0.len() - 1] - self.0[0]
    }
}

/// N×Q observation matrix; row n is the observation at time t_n.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observations(DMatrix<f64>);

impl Observations {
    pub fn new(y: DMatrix<f64>) -> Result<Self> {
        if y.nrows() == 0 || y.ncols() == 0 {
            return Err(Error::InvalidInput("observations must be non-empty".into()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("observations must be finite".into()));
        }
        Ok(Self(y))
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn q(&self) -> usize {
        self.0.ncols()
    }

    pub fn row(&self, n: usize) -> DVector<f64> {
        self.0.row(n).transpose()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self(self.0.select_rows(idx))
    }

    pub(crate) fn check_times(&self, times: &TimePoints) -> Result<()> {
        if self.n() != times.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} observations but {} time points",
                self.n(),
                times.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Kernel {
    #[default]
    SquaredExponential,
}

/// Kernel, centers and bandwidths defining the weight functions ω_d(t).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightScheme {
    pub kernel: Kernel,
    pub centers: Vec<f64>,
    /// Either one shared bandwidth or one per center.
    pub bandwidths: Vec<f64>,
}

impl WeightScheme {
    pub fn new(centers: Vec<f64>, bandwidths: Vec<f64>) -> Result<Self> {
        if centers.is_empty() {
            return Err(Error::InvalidInput("weight scheme needs at least one center".into()));
        }
        if bandwidths.len() != 1 && bandwidths.len() != centers.len() {
            return Err(Error::InvalidInput(format!(
                "expected 1 or {} bandwidths, got {}",
                centers.len(),
                bandwidths.len()
            )));
        }
        if bandwidths.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
            return Err(Error::InvalidInput("bandwidths must be positive and finite".into()));
        }
        if centers.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput("centers must be finite".into()));
        }
        Ok(Self {
            kernel: Kernel::SquaredExponential,
            centers,
            bandwidths,
        })
    }

    /// One center per time point with a shared bandwidth.
    pub fn at_times(times: &TimePoints, h0: f64) -> Result<Self> {
        Self::new(times.as_slice().to_vec(), vec![h0])
    }

    /// Single basis: the homoscedastic model.
    pub fn homoscedastic() -> Self {
        Self {
            kernel: Kernel::SquaredExponential,
            centers: vec![0.0],
            bandwidths: vec![1.0],
        }
    }

    pub fn n_bases(&self) -> usize {
        self.centers.len()
    }

    pub fn bandwidth(&self, d: usize) -> f64 {
        if self.bandwidths.len() == 1 {
            self.bandwidths[0]
        } else {
            self.bandwidths[d]
        }
    }

    /// Same centers, new shared bandwidth.
    pub fn with_bandwidth(&self, h0: f64) -> Result<Self> {
        Self::new(self.centers.clone(), vec![h0])
    }

    fn eval_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        let d_count = self.n_bases();
        if d_count == 1 {
            out[0] = 1.0;
            return Ok(());
        }
        let mut max = f64::NEG_INFINITY;
        for (d, o) in out.iter_mut().enumerate() {
            let z = (t - self.centers[d]) / self.bandwidth(d);
            *o = -z * z;
            max = max.max(*o);
        }
        if !(max >= KERNEL_FLOOR.ln()) {
            return Err(Error::DegenerateWeights { t });
        }
        let mut sum = 0.0;
        for o in out.iter_mut() {
            *o = (*o - max).exp();
            sum += *o;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
        Ok(())
    }

    /// Weights at `t`, a length-D simplex vector.
    pub fn eval(&self, t: f64) -> Result<DVector<f64>> {
        let mut out = vec![0.0; self.n_bases()];
        self.eval_into(t, &mut out)?;
        Ok(DVector::from_vec(out))
    }

    /// N×D matrix whose row n holds the weights at `times[n]`.
    pub fn matrix(&self, times: &[f64]) -> Result<DMatrix<f64>> {
        let d = self.n_bases();
        let mut w = DMatrix::zeros(times.len(), d);
        let mut row = vec![0.0; d];
        for (n, &t) in times.iter().enumerate() {
            self.eval_into(t, &mut row)?;
            for (j, v) in row.iter().enumerate() {
                w[(n, j)] = *v;
            }
        }
        Ok(w)
    }
}

pub fn eval_weights(t: f64, scheme: &WeightScheme) -> Result<DVector<f64>> {
    scheme.eval(t)
}

/// 16 log-spaced bandwidths from the smallest time gap to the full range.
pub fn default_bandwidth_grid(times: &TimePoints) -> Vec<f64> {
    log_spaced_grid(times, 16)
}

pub fn log_spaced_grid(times: &TimePoints, count: usize) -> Vec<f64> {
    let lo = times.min_gap().unwrap_or(1.0);
    let hi = times.range().max(lo);
    if count <= 1 || hi <= lo {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn single_basis_is_one_everywhere() {
        let s = WeightScheme::homoscedastic();
        assert_eq!(s.eval(1e9).unwrap()[0], 1.0);
    }

    #[test]
    fn symmetric_midpoint() {
        let s = WeightScheme::new(vec![0.0, 10.0], vec![3.0]).unwrap();
        let w = s.eval(5.0).unwrap();
        assert_relative_eq!(w[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(w[1], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn two_center_values() {
        let s = WeightScheme::new(vec![0.0, 10.0], vec![10.0]).unwrap();
        let w = s.eval(0.0).unwrap();
        let e = (-1.0f64).exp();
        assert_relative_eq!(w[0], 1.0 / (1.0 + e), epsilon = 1e-15);
        assert_relative_eq!(w[1], e / (1.0 + e), epsilon = 1e-15);
        assert_relative_eq!(w[0], 0.7310585786300049, epsilon = 1e-12);
    }

    #[test]
    fn underflow_is_an_error() {
        let s = WeightScheme::new(vec![0.0, 1.0], vec![1e-3]).unwrap();
        assert!(matches!(s.eval(100.0), Err(Error::DegenerateWeights { .. })));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(WeightScheme::new(vec![], vec![1.0]).is_err());
        assert!(WeightScheme::new(vec![0.0], vec![0.0]).is_err());
        assert!(WeightScheme::new(vec![0.0, 1.0, 2.0], vec![1.0, 1.0]).is_err());
        assert!(TimePoints::new(vec![1.0, 1.0]).is_err());
        assert!(TimePoints::new(vec![]).is_err());
    }

    #[test]
    fn grid_spans_gap_to_range() {
        let t = TimePoints::regular(300);
        let g = default_bandwidth_grid(&t);
        assert_eq!(g.len(), 16);
        assert_relative_eq!(g[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(g[15], 299.0, epsilon = 1e-9);
    }

    proptest! {
        #[test]
        fn weights_form_a_simplex(
            centers in prop::collection::vec(-50.0f64..50.0, 1..8),
            h in 0.5f64..40.0,
            t in -60.0f64..60.0,
        ) {
            let s = WeightScheme::new(centers, vec![h]).unwrap();
            if let Ok(w) = s.eval(t) {
                prop_assert!(w.iter().all(|v| *v >= 0.0));
                prop_assert!((w.sum() - 1.0).abs() < 1e-12);
            }
        }
    }
}
