//! Units, capture patterns and cross-classification tables.
//!
//! A capture pattern over `k` lists is stored as a bit mask in which list `j`
//! (0-based, in column order) occupies bit `k - 1 - j`. Reading the mask as a
//! binary number therefore gives the usual big-endian string (`101` is on
//! lists 1 and 3). Cell arrays are indexed by `mask - 1`; serialized output
//! walks the masks in descending order (`111, 110, 101, 100, 011, 010, 001`).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported number of lists. Cell arrays have `2^k - 1` entries.
pub const MAX_LISTS: usize = 16;

/// Number of observable (nonzero) capture patterns on `k` lists.
pub fn n_cells(k: usize) -> usize {
    (1usize << k) - 1
}

/// Nonzero patterns on `k` lists in serialization order.
pub fn nonzero_patterns(k: usize) -> impl DoubleEndedIterator<Item = CapturePattern> {
    (1..=n_cells(k) as u32)
        .rev()
        .map(move |mask| CapturePattern { mask, k: k as u8 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CapturePattern {
    mask: u32,
    k: u8,
}

impl CapturePattern {
    pub fn new(bits: &[u8]) -> Result<Self> {
        let k = bits.len();
        if !(2..=MAX_LISTS).contains(&k) {
            return Err(Error::InvalidPattern(format!(
                "pattern length {k} outside 2..={MAX_LISTS}"
            )));
        }
        let mut mask = 0u32;
        for (j, &b) in bits.iter().enumerate() {
            match b {
                0 => {}
                1 => mask |= 1 << (k - 1 - j),
                other => {
                    return Err(Error::InvalidPattern(format!(
                        "entry {j} is {other}, expected 0 or 1"
                    )))
                }
            }
        }
        Ok(Self { mask, k: k as u8 })
    }

    pub fn from_mask(mask: u32, k: usize) -> Result<Self> {
        if !(2..=MAX_LISTS).contains(&k) {
            return Err(Error::InvalidPattern(format!(
                "pattern length {k} outside 2..={MAX_LISTS}"
            )));
        }
        if mask >> k != 0 {
            return Err(Error::InvalidPattern(format!(
                "mask {mask:#b} has bits beyond {k} lists"
            )));
        }
        Ok(Self { mask, k: k as u8 })
    }

    pub fn zero(k: usize) -> Self {
        Self { mask: 0, k: k as u8 }
    }

    pub fn mask(&self) -> u32 {
        self.mask
    }

    pub fn k(&self) -> usize {
        self.k as usize
    }

    /// Membership on list `j` (0-based).
    pub fn on_list(&self, j: usize) -> bool {
        self.mask >> (self.k() - 1 - j) & 1 == 1
    }

    pub fn bits(&self) -> Vec<u8> {
        (0..self.k()).map(|j| self.on_list(j) as u8).collect()
    }

    pub fn is_nonzero(&self) -> bool {
        self.mask != 0
    }

    /// Number of lists the unit appears on.
    pub fn total(&self) -> u32 {
        self.mask.count_ones()
    }

    /// Position of this pattern in a cell array. Only meaningful when nonzero.
    pub fn cell_index(&self) -> usize {
        self.mask as usize - 1
    }
}

impl fmt::Display for CapturePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for j in 0..self.k() {
            f.write_str(if self.on_list(j) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservedUnit {
    pub id: String,
    pub covariates: Vec<f64>,
    pub pattern: CapturePattern,
}

impl ObservedUnit {
    pub fn new(id: impl Into<String>, covariates: Vec<f64>, pattern: CapturePattern) -> Result<Self> {
        let id = id.into();
        if !pattern.is_nonzero() {
            return Err(Error::InvalidDataset(format!(
                "unit `{id}` has the all-zero capture pattern"
            )));
        }
        if let Some(v) = covariates.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset(format!(
                "unit `{id}` has non-finite covariate {v}"
            )));
        }
        Ok(Self {
            id,
            covariates,
            pattern,
        })
    }
}

/// Observed units for `k` lists with `q` covariates each.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    k: usize,
    q: usize,
    units: Vec<ObservedUnit>,
    list_labels: Vec<String>,
    covariate_labels: Vec<String>,
}

impl Dataset {
    pub fn new(
        list_labels: Vec<String>,
        covariate_labels: Vec<String>,
        units: Vec<ObservedUnit>,
    ) -> Result<Self> {
        let k = list_labels.len();
        let q = covariate_labels.len();
        if !(2..=MAX_LISTS).contains(&k) {
            return Err(Error::InvalidDataset(format!(
                "need between 2 and {MAX_LISTS} lists, got {k}"
            )));
        }
        if units.is_empty() {
            return Err(Error::InvalidDataset("no observed units".into()));
        }
        for u in &units {
            if u.pattern.k() != k {
                return Err(Error::InvalidDataset(format!(
                    "unit `{}` has {} lists, expected {k}",
                    u.id,
                    u.pattern.k()
                )));
            }
            if u.covariates.len() != q {
                return Err(Error::InvalidDataset(format!(
                    "unit `{}` has {} covariates, expected {q}",
                    u.id,
                    u.covariates.len()
                )));
            }
        }
        Ok(Self {
            k,
            q,
            units,
            list_labels,
            covariate_labels,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn q(&self) -> usize {
        self.q
    }

    /// Number of observed units, `n_c`.
    pub fn n_c(&self) -> usize {
        self.units.len()
    }

    pub fn units(&self) -> &[ObservedUnit] {
        &self.units
    }

    pub fn list_labels(&self) -> &[String] {
        &self.list_labels
    }

    pub fn covariate_labels(&self) -> &[String] {
        &self.covariate_labels
    }

    pub fn covariate_index(&self, label: &str) -> Option<usize> {
        self.covariate_labels.iter().position(|l| l == label)
    }

    /// Keeps only the given lists (in the given order). Units that end up on
    /// none of the kept lists are dropped, since they would be unobserved.
    pub fn select_lists(&self, keep: &[usize]) -> Result<Dataset> {
        for &j in keep {
            if j >= self.k {
                return Err(Error::IndexOutOfRange {
                    index: j,
                    len: self.k,
                });
            }
        }
        let units = self
            .units
            .iter()
            .filter_map(|u| {
                let bits: Vec<u8> = keep.iter().map(|&j| u.pattern.on_list(j) as u8).collect();
                let pattern = CapturePattern::new(&bits).ok()?;
                pattern.is_nonzero().then(|| ObservedUnit {
                    id: u.id.clone(),
                    covariates: u.covariates.clone(),
                    pattern,
                })
            })
            .collect();
        let labels = keep.iter().map(|&j| self.list_labels[j].clone()).collect();
        Dataset::new(labels, self.covariate_labels.clone(), units)
    }
}

/// Counts over the nonzero capture patterns, plus the all-zero cell when it
/// is known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossClassification {
    k: usize,
    counts: Vec<f64>,
    missing_cell: Option<f64>,
}

impl CrossClassification {
    /// `counts` is indexed by `mask - 1`.
    pub fn new(k: usize, counts: Vec<f64>) -> Result<Self> {
        if !(2..=MAX_LISTS).contains(&k) {
            return Err(Error::InvalidArgument(format!("list count {k} unsupported")));
        }
        if counts.len() != n_cells(k) {
            return Err(Error::InvalidArgument(format!(
                "expected {} cells for {k} lists, got {}",
                n_cells(k),
                counts.len()
            )));
        }
        if counts.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::InvalidArgument("cell counts must be finite and >= 0".into()));
        }
        Ok(Self {
            k,
            counts,
            missing_cell: None,
        })
    }

    /// Builds a table from `(pattern string, count)` pairs; absent patterns are 0.
    pub fn from_pairs(k: usize, pairs: &[(&str, f64)]) -> Result<Self> {
        let mut counts = vec![0.0; n_cells(k)];
        for (s, c) in pairs {
            let bits: Vec<u8> = s
                .chars()
                .map(|ch| match ch {
                    '0' => Ok(0),
                    '1' => Ok(1),
                    _ => Err(Error::InvalidPattern(s.to_string())),
                })
                .collect::<Result<_>>()?;
            let p = CapturePattern::new(&bits)?;
            if p.k() != k || !p.is_nonzero() {
                return Err(Error::InvalidPattern(s.to_string()));
            }
            counts[p.cell_index()] = *c;
        }
        Self::new(k, counts)
    }

    pub fn with_missing_cell(mut self, c0: f64) -> Result<Self> {
        if !c0.is_finite() || c0 < 0.0 {
            return Err(Error::InvalidArgument(format!("missing cell {c0} must be >= 0")));
        }
        self.missing_cell = Some(c0);
        Ok(self)
    }

    pub fn without_missing_cell(mut self) -> Self {
        self.missing_cell = None;
        self
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn missing_cell(&self) -> Option<f64> {
        self.missing_cell
    }

    pub fn count(&self, pattern: CapturePattern) -> f64 {
        self.counts[pattern.cell_index()]
    }

    /// Sum over the observable cells.
    pub fn observed_total(&self) -> f64 {
        self.counts.iter().sum()
    }

    /// `(pattern, count)` in serialization order.
    pub fn iter(&self) -> impl Iterator<Item = (CapturePattern, f64)> + '_ {
        nonzero_patterns(self.k).map(move |p| (p, self.count(p)))
    }

    /// Relative frequencies of the observable cells.
    pub fn to_distribution(&self) -> Result<PatternDistribution> {
        let total = self.observed_total();
        if total <= 0.0 {
            return Err(Error::InvalidArgument("table has no observed mass".into()));
        }
        PatternDistribution::new(self.k, self.counts.iter().map(|c| c / total).collect())
    }
}

/// Probabilities over the nonzero patterns, summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternDistribution {
    k: usize,
    probs: Vec<f64>,
}

const DIST_SUM_TOL: f64 = 1e-10;

impl PatternDistribution {
    /// `probs` is indexed by `mask - 1`.
    pub fn new(k: usize, probs: Vec<f64>) -> Result<Self> {
        if !(2..=MAX_LISTS).contains(&k) || probs.len() != n_cells(k) {
            return Err(Error::InvalidArgument(format!(
                "distribution over {k} lists needs {} cells, got {}",
                n_cells(k.min(MAX_LISTS)),
                probs.len()
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidArgument("probabilities must be finite and >= 0".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > DIST_SUM_TOL {
            return Err(Error::InvalidArgument(format!(
                "probabilities sum to {total}, expected 1"
            )));
        }
        Ok(Self { k, probs })
    }

    /// Normalizes nonnegative weights into a distribution.
    pub fn from_weights(k: usize, weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::InvalidArgument("weights must have positive finite sum".into()));
        }
        Self::new(k, weights.into_iter().map(|w| w / total).collect())
    }

    pub fn uniform(k: usize) -> Self {
        let m = n_cells(k);
        Self {
            k,
            probs: vec![1.0 / m as f64; m],
        }
    }

    /// All mass on a single pattern, the indicator array `a(y)`.
    pub fn one_hot(pattern: CapturePattern) -> Self {
        let mut probs = vec![0.0; n_cells(pattern.k())];
        probs[pattern.cell_index()] = 1.0;
        Self {
            k: pattern.k(),
            probs,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, pattern: CapturePattern) -> f64 {
        self.probs[pattern.cell_index()]
    }

    pub fn min_prob(&self) -> f64 {
        self.probs.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

pub fn cross_classify(dataset: &Dataset) -> CrossClassification {
    let mut counts = vec![0.0; n_cells(dataset.k())];
    for u in dataset.units() {
        counts[u.pattern.cell_index()] += 1.0;
    }
    CrossClassification {
        k: dataset.k(),
        counts,
        missing_cell: None,
    }
}

/// Marginalizes onto the lists `keep = (a, b)`, in that order.
///
/// Mass whose kept coordinates are both zero is no longer observable in the
/// two-list table; it is recorded as the known all-zero cell, so that the
/// observed total plus `missing_cell` equals the input total.
pub fn collapse_lists(cc: &CrossClassification, keep: (usize, usize)) -> Result<CrossClassification> {
    if cc.missing_cell.is_some() {
        return Err(Error::InvalidArgument(
            "cannot collapse a table whose missing cell is set".into(),
        ));
    }
    let k = cc.k;
    for index in [keep.0, keep.1] {
        if index >= k {
            return Err(Error::IndexOutOfRange { index, len: k });
        }
    }
    if keep.0 == keep.1 {
        return Err(Error::InvalidArgument("kept lists must be distinct".into()));
    }
    let mut counts = vec![0.0; 3];
    let mut dropped = 0.0;
    for (p, c) in cc.iter() {
        let mask = (p.on_list(keep.0) as u32) << 1 | p.on_list(keep.1) as u32;
        if mask == 0 {
            dropped += c;
        } else {
            counts[mask as usize - 1] += c;
        }
    }
    Ok(CrossClassification {
        k: 2,
        counts,
        missing_cell: Some(dropped),
    })
}

/// Appends a `rank` covariate: units ordered by how many lists they appear
/// on, least-observed first, with ties kept in input order.
pub fn rank_covariate(dataset: &Dataset) -> Dataset {
    let mut order: Vec<usize> = (0..dataset.n_c()).collect();
    order.sort_by_key(|&i| dataset.units[i].pattern.total());
    let mut rank = vec![0.0; dataset.n_c()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = (r + 1) as f64;
    }
    let units = dataset
        .units
        .iter()
        .zip(rank)
        .map(|(u, r)| {
            let mut covariates = u.covariates.clone();
            covariates.push(r);
            ObservedUnit {
                id: u.id.clone(),
                covariates,
                pattern: u.pattern,
            }
        })
        .collect();
    let mut labels = dataset.covariate_labels.clone();
    labels.push("rank".to_string());
    Dataset {
        k: dataset.k,
        q: dataset.q + 1,
        units,
        list_labels: dataset.list_labels.clone(),
        covariate_labels: labels,
    }
}
