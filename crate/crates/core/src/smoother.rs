//! Kernel weights over covariates and the smoothed local pattern
//! distributions built from them.
//!
//! Only covariates are smoothed; the capture pattern enters through exact
//! indicators, so each local distribution is a weighted average of one-hot
//! pattern arrays.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{n_cells, Dataset, PatternDistribution};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    /// Product Gaussian with standard deviation `D_d` per covariate.
    Gaussian,
    /// Equal weight on every unit within `D_d` of the target in each covariate.
    Boxcar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandwidthMethod {
    Fixed,
    Lscv,
}

/// Candidate bandwidths for cross-validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LscvGrid {
    /// `points` values log-spaced over `[range/n_c, range]` of each covariate.
    LogSpaced { points: usize },
    /// Explicit candidates, each a full bandwidth vector.
    Explicit(Vec<Vec<f64>>),
}

impl Default for LscvGrid {
    fn default() -> Self {
        LscvGrid::LogSpaced { points: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthConfig {
    pub method: BandwidthMethod,
    /// Diagonal of the bandwidth matrix, one entry per covariate. Infinite
    /// entries are allowed and make that covariate irrelevant.
    pub values: Option<Vec<f64>>,
    pub kernel: Kernel,
    pub grid: LscvGrid,
}

impl BandwidthConfig {
    pub fn fixed(values: Vec<f64>, kernel: Kernel) -> Self {
        Self {
            method: BandwidthMethod::Fixed,
            values: Some(values),
            kernel,
            grid: LscvGrid::default(),
        }
    }

    pub fn lscv(kernel: Kernel) -> Self {
        Self {
            method: BandwidthMethod::Lscv,
            values: None,
            kernel,
            grid: LscvGrid::default(),
        }
    }

    pub fn with_grid(mut self, grid: LscvGrid) -> Self {
        self.grid = grid;
        self
    }

    /// Checks the config against a covariate count.
    pub fn validate(&self, q: usize) -> Result<()> {
        if self.method == BandwidthMethod::Fixed && self.values.is_none() {
            return Err(Error::InvalidArgument("fixed bandwidth needs values".into()));
        }
        if let Some(v) = &self.values {
            check_bandwidths(v, q)?;
        }
        Ok(())
    }

    /// Resolved bandwidth values, or an error if selection has not run.
    pub fn resolved(&self, q: usize) -> Result<&[f64]> {
        match &self.values {
            Some(v) => {
                check_bandwidths(v, q)?;
                Ok(v)
            }
            None => Err(Error::InvalidArgument(
                "bandwidth not resolved; run select_bandwidth first".into(),
            )),
        }
    }
}

fn check_bandwidths(v: &[f64], q: usize) -> Result<()> {
    if v.len() != q {
        return Err(Error::InvalidArgument(format!(
            "{} bandwidths given for {q} covariates",
            v.len()
        )));
    }
    if v.iter().any(|b| b.is_nan() || *b <= 0.0) {
        return Err(Error::InvalidArgument("bandwidths must be > 0".into()));
    }
    Ok(())
}

/// Normalized kernel weights for one target unit.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightProfile {
    pub index: usize,
    pub weights: Vec<f64>,
    /// Effective degrees of freedom, `sum(w) / max(w)`.
    pub eta: f64,
}

/// Log of the unnormalized kernel between two covariate vectors;
/// `-inf` when outside a boxcar window.
#[inline]
fn log_kernel(kernel: Kernel, a: &[f64], b: &[f64], bw: &[f64]) -> f64 {
    match kernel {
        Kernel::Gaussian => {
            let mut s = 0.0;
            for ((x, y), h) in a.iter().zip(b).zip(bw) {
                let z = (x - y) / h;
                s += z * z;
            }
            -0.5 * s
        }
        Kernel::Boxcar => {
            let inside = a.iter().zip(b).zip(bw).all(|((x, y), h)| (x - y).abs() <= *h);
            if inside {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        }
    }
}

/// Raw weights `exp(log k - max log k)` for the target `i`, optionally
/// leaving the target itself out (its slot is then 0).
fn raw_weights(dataset: &Dataset, i: usize, kernel: Kernel, bw: &[f64], leave_out: bool) -> Vec<f64> {
    let units = dataset.units();
    let xi = &units[i].covariates;
    let mut logs: Vec<f64> = units
        .iter()
        .map(|u| log_kernel(kernel, xi, &u.covariates, bw))
        .collect();
    if leave_out {
        logs[i] = f64::NEG_INFINITY;
    }
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![0.0; units.len()];
    }
    logs.iter().map(|l| (l - max).exp()).collect()
}

pub fn kernel_weights(dataset: &Dataset, i: usize, bw: &BandwidthConfig) -> Result<WeightProfile> {
    if i >= dataset.n_c() {
        return Err(Error::InvalidArgument(format!(
            "unit index {i} out of range for {} units",
            dataset.n_c()
        )));
    }
    let values = bw.resolved(dataset.q())?;
    Ok(profile_from_values(dataset, i, bw.kernel, values))
}

pub(crate) fn profile_from_values(dataset: &Dataset, i: usize, kernel: Kernel, values: &[f64]) -> WeightProfile {
    let raw = raw_weights(dataset, i, kernel, values, false);
    // The target is always in its own support, so the maximum raw weight is 1.
    let total: f64 = raw.iter().sum();
    let max = raw.iter().copied().fold(0.0, f64::max);
    WeightProfile {
        index: i,
        eta: total / max,
        weights: raw.iter().map(|w| w / total).collect(),
    }
}

pub fn local_distribution(dataset: &Dataset, wp: &WeightProfile) -> PatternDistribution {
    let mut probs = vec![0.0; n_cells(dataset.k())];
    for (u, w) in dataset.units().iter().zip(&wp.weights) {
        probs[u.pattern.cell_index()] += w;
    }
    // Renormalize away accumulated rounding.
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    PatternDistribution::new(dataset.k(), probs).expect("weights form a distribution")
}

/// Leave-one-out least-squares risk of the pattern indicators,
/// `sum_i sum_y (I(y_i = y) - pi_hat^{(-i)}(y))^2`.
///
/// A unit with no other unit in its window predicts the zero vector.
pub fn lscv_risk(dataset: &Dataset, kernel: Kernel, values: &[f64]) -> Result<f64> {
    if dataset.n_c() < 2 {
        return Err(Error::InvalidArgument(
            "leave-one-out cross-validation needs at least 2 units".into(),
        ));
    }
    check_bandwidths(values, dataset.q())?;
    let m = n_cells(dataset.k());
    let mut risk = 0.0;
    let mut acc = vec![0.0; m];
    for (i, unit) in dataset.units().iter().enumerate() {
        let raw = raw_weights(dataset, i, kernel, values, true);
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (u, w) in dataset.units().iter().zip(&raw) {
            acc[u.pattern.cell_index()] += w;
        }
        let total: f64 = acc.iter().sum();
        let own = unit.pattern.cell_index();
        for (c, a) in acc.iter().enumerate() {
            let pred = if total > 0.0 { a / total } else { 0.0 };
            let target = if c == own { 1.0 } else { 0.0 };
            risk += (target - pred) * (target - pred);
        }
    }
    Ok(risk)
}

/// Candidate bandwidth vectors in ascending order.
pub fn lscv_candidates(dataset: &Dataset, grid: &LscvGrid) -> Result<Vec<Vec<f64>>> {
    match grid {
        LscvGrid::Explicit(c) => {
            if c.is_empty() {
                return Err(Error::InvalidArgument("empty bandwidth grid".into()));
            }
            for v in c {
                check_bandwidths(v, dataset.q())?;
            }
            Ok(c.clone())
        }
        LscvGrid::LogSpaced { points } => {
            if *points == 0 {
                return Err(Error::InvalidArgument("empty bandwidth grid".into()));
            }
            let ranges: Vec<f64> = (0..dataset.q())
                .map(|d| {
                    let (lo, hi) = dataset.units().iter().fold(
                        (f64::INFINITY, f64::NEG_INFINITY),
                        |(lo, hi), u| (lo.min(u.covariates[d]), hi.max(u.covariates[d])),
                    );
                    hi - lo
                })
                .collect();
            if let Some(d) = ranges.iter().position(|r| *r <= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "covariate `{}` is constant; cannot build a bandwidth grid",
                    dataset.covariate_labels()[d]
                )));
            }
            let lo = 1.0 / dataset.n_c() as f64;
            Ok((0..*points)
                .map(|s| {
                    let t = if *points == 1 {
                        1.0
                    } else {
                        s as f64 / (*points - 1) as f64
                    };
                    let frac = lo.powf(1.0 - t);
                    ranges.iter().map(|r| r * frac).collect()
                })
                .collect())
        }
    }
}

/// Picks the grid point with the smallest leave-one-out risk; ties go to the
/// earlier (smaller) candidate. Returns a fixed config holding the choice.
pub fn select_bandwidth(dataset: &Dataset, cfg: &BandwidthConfig) -> Result<BandwidthConfig> {
    if dataset.q() == 0 {
        return Err(Error::InvalidArgument(
            "bandwidth selection needs at least one covariate".into(),
        ));
    }
    if dataset.n_c() < 2 {
        return Err(Error::InvalidArgument(
            "leave-one-out cross-validation needs at least 2 units".into(),
        ));
    }
    let candidates = lscv_candidates(dataset, &cfg.grid)?;
    let risks = candidates
        .par_iter()
        .map(|v| lscv_risk(dataset, cfg.kernel, v))
        .collect::<Result<Vec<f64>>>()?;
    let mut best = 0;
    for (j, r) in risks.iter().enumerate() {
        if *r < risks[best] {
            best = j;
        }
    }
    Ok(BandwidthConfig {
        method: BandwidthMethod::Fixed,
        values: Some(candidates[best].clone()),
        kernel: cfg.kernel,
        grid: cfg.grid.clone(),
    })
}

/// Resolves `cfg` for `dataset`: fixed configs pass through, LSCV runs
/// selection.
pub fn resolve_bandwidth(dataset: &Dataset, cfg: &BandwidthConfig) -> Result<Vec<f64>> {
    match cfg.method {
        BandwidthMethod::Fixed => Ok(cfg.resolved(dataset.q())?.to_vec()),
        BandwidthMethod::Lscv => Ok(select_bandwidth(dataset, cfg)?.values.unwrap()),
    }
}
