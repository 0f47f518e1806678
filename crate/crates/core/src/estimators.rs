//! Population-size estimators and the per-unit smoothing pipeline.
//!
//! Every observed unit `i` contributes itself plus an imputed
//! `pi0_i = pi_hat(0, x_i)` unobserved units, so `n_hat = n_c + sum_i pi0_i`,
//! which is the Horvitz-Thompson sum of `1 / psi_i` with
//! `psi_i = 1 / (pi0_i + 1)`.

use std::collections::HashMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{cross_classify, CapturePattern, CrossClassification, Dataset, PatternDistribution};
use crate::error::{Error, Result};
use crate::loglinear::{odd_even_impute, pmml_fit, FitStatus, LogLinearModel, Term};
use crate::selection::{select_local_model, Criterion, SelectionConfig};
use crate::smoother::{local_distribution, profile_from_values, resolve_bandwidth, BandwidthConfig, BandwidthMethod, Kernel};

pub const DEFAULT_PSI_FLOOR: f64 = 1e-3;

/// Two-list Petersen estimate of the unobserved cell, `c10 c01 / c11`.
pub fn petersen(cc: &CrossClassification) -> Result<f64> {
    if cc.k() != 2 {
        return Err(Error::InvalidArgument(format!(
            "Petersen needs a 2-list table, got {} lists",
            cc.k()
        )));
    }
    let c = |s: u32| cc.count(CapturePattern::from_mask(s, 2).expect("valid mask"));
    let c11 = c(0b11);
    if c11 == 0.0 {
        return Err(Error::ZeroOverlap);
    }
    Ok(c(0b10) * c(0b01) / c11)
}

/// Probability of appearing on at least one list, `1 / (pi0 + 1)`.
pub fn detection_prob(pi0: f64) -> f64 {
    1.0 / (pi0 + 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HorvitzThompson {
    pub n_tilde: f64,
    /// Indices whose detection probability was raised to the floor.
    pub clamped: Vec<usize>,
}

/// `sum_i 1 / psi_i`, with each `psi_i` raised to at least `floor`.
pub fn horvitz_thompson(psi: &[f64], floor: f64) -> Result<HorvitzThompson> {
    if !(floor > 0.0 && floor <= 1.0) {
        return Err(Error::InvalidArgument(format!("psi floor {floor} outside (0, 1]")));
    }
    let mut n_tilde = 0.0;
    let mut clamped = Vec::new();
    for (i, &p) in psi.iter().enumerate() {
        if p.is_nan() || p > 1.0 {
            return Err(Error::InvalidArgument(format!("psi[{i}] = {p} outside (0, 1]")));
        }
        let p = if p < floor {
            clamped.push(i);
            floor
        } else {
            p
        };
        n_tilde += 1.0 / p;
    }
    Ok(HorvitzThompson { n_tilde, clamped })
}

fn adjusted_saturated(dist: &PatternDistribution, eta: f64) -> Result<(f64, FitStatus)> {
    let fit = pmml_fit(&LogLinearModel::equal_catch(dist.k()), dist, eta)?;
    if fit.status == FitStatus::Failed {
        return Err(Error::NonConvergence("equal-catch fit".into()));
    }
    let nu = dist.min_prob();
    let alpha = eta * nu / (1.0 + eta * nu);
    let blend: Vec<f64> = fit
        .fitted
        .iter()
        .zip(dist.probs())
        .map(|(m, p)| (1.0 - alpha) * m + alpha * p)
        .collect();
    let blend = PatternDistribution::from_weights(dist.k(), blend)?;
    Ok((odd_even_impute(&blend)?, fit.status))
}

/// Odd/even imputation on a blend of the equal-catchability fit and the
/// smoothed table, with weight `alpha = eta nu / (1 + eta nu)` on the table
/// and `nu` its smallest cell.
pub fn adjusted_saturated_impute(dist: &PatternDistribution, eta: f64) -> Result<f64> {
    adjusted_saturated(dist, eta).map(|(v, _)| v)
}

/// How the zero cell is imputed for each unit.
#[derive(Debug, Clone, PartialEq)]
pub enum Imputer {
    Model(LogLinearModel),
    AdjustedSaturated,
    Select(SelectionConfig),
}

impl Imputer {
    /// `independence`, `saturated`, `equal-catch`, `quasi-symmetry`,
    /// `intercept`, `adjusted-saturated`, `select-bic`, `select-aicc`, or an
    /// explicit term list.
    pub fn parse(name: &str, k: usize) -> Result<Self> {
        Ok(match name.trim() {
            "adjusted-saturated" | "adjusted_saturated" => Imputer::AdjustedSaturated,
            "select-bic" => Imputer::Select(SelectionConfig::default_for(k, Criterion::Bic)),
            "select-aicc" => Imputer::Select(SelectionConfig::default_for(k, Criterion::Aicc)),
            other => Imputer::Model(LogLinearModel::parse(other, k)?),
        })
    }

    pub fn k(&self) -> Option<usize> {
        match self {
            Imputer::Model(m) => Some(m.k()),
            Imputer::AdjustedSaturated => None,
            Imputer::Select(cfg) => Some(cfg.k()),
        }
    }
}

impl fmt::Display for Imputer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Imputer::Model(m) => f.write_str(m.name()),
            Imputer::AdjustedSaturated => f.write_str("adjusted-saturated"),
            Imputer::Select(cfg) => match cfg.criterion {
                Criterion::Bic => f.write_str("select-bic"),
                Criterion::Aicc => f.write_str("select-aicc"),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub bandwidth: BandwidthConfig,
    pub imputer: Imputer,
    pub psi_floor: f64,
    /// Fit one model to the raw table instead of smoothing per unit.
    pub global: bool,
    /// Count imputations only inside this region.
    pub region: Option<Region>,
}

impl PipelineConfig {
    pub fn new(bandwidth: BandwidthConfig, imputer: Imputer) -> Self {
        Self {
            bandwidth,
            imputer,
            psi_floor: DEFAULT_PSI_FLOOR,
            global: false,
            region: None,
        }
    }

    pub fn global(imputer: Imputer) -> Self {
        Self {
            bandwidth: BandwidthConfig::fixed(vec![], Kernel::Gaussian),
            imputer,
            psi_floor: DEFAULT_PSI_FLOOR,
            global: true,
            region: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum UnitStatus {
    #[default]
    Ok,
    /// The fit stopped at the coefficient bound.
    Boundary,
    /// No imputation; the unit contributes 0.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitEstimate {
    pub id: String,
    pub x: Vec<f64>,
    pub pi0: f64,
    pub psi: f64,
    pub model: String,
    /// Smoothed local distribution, indexed by `mask - 1`.
    #[serde(skip)]
    pub dist: Vec<f64>,
    #[serde(skip)]
    pub eta: f64,
    #[serde(skip)]
    pub status: UnitStatus,
    #[serde(skip)]
    pub clamped: bool,
    #[serde(skip)]
    pub excluded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub imputer: String,
    pub global: bool,
    pub kernel: Kernel,
    pub bandwidth_method: BandwidthMethod,
    pub psi_floor: f64,
    pub lists: Vec<String>,
    pub covariates: Vec<String>,
    pub restriction: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub n_hat: f64,
    pub c0_hat: f64,
    pub n_c: usize,
    pub model: String,
    pub bandwidth: Option<Vec<f64>>,
    pub per_unit: Vec<UnitEstimate>,
    pub warnings: Vec<String>,
    /// Some unit imputations failed and were counted as 0.
    pub partial: bool,
    pub config: ConfigEcho,
}

impl EstimateReport {
    pub fn k(&self) -> usize {
        self.config.lists.len()
    }

    fn retotal(&mut self) {
        self.c0_hat = self.per_unit.iter().map(|u| u.pi0).sum();
        self.n_hat = self.n_c as f64 + self.c0_hat;
        self.partial = self
            .per_unit
            .iter()
            .any(|u| u.status == UnitStatus::Failed && !u.excluded);
    }
}

struct Imputation {
    pi0: Option<f64>,
    model: String,
    status: UnitStatus,
    /// Quasi-symmetry squared-sum coefficient, when fitted.
    squared_sum: Option<f64>,
}

fn impute(imputer: &Imputer, dist: &PatternDistribution, eta: f64) -> Result<Imputation> {
    let from_fit = |fit: crate::loglinear::LocalFit| {
        let squared_sum = fit
            .model
            .terms()
            .iter()
            .position(|t| *t == Term::SquaredSum)
            .map(|j| fit.coefficients[j]);
        let status = match fit.status {
            FitStatus::Converged => UnitStatus::Ok,
            FitStatus::Boundary => UnitStatus::Boundary,
            FitStatus::Failed => UnitStatus::Failed,
        };
        Imputation {
            pi0: (status != UnitStatus::Failed).then_some(fit.pi0),
            model: fit.model.name().to_string(),
            status,
            squared_sum,
        }
    };
    Ok(match imputer {
        Imputer::Model(m) => from_fit(pmml_fit(m, dist, eta)?),
        Imputer::Select(cfg) => from_fit(select_local_model(dist, eta, cfg)?),
        Imputer::AdjustedSaturated => {
            let (pi0, status) = match adjusted_saturated(dist, eta) {
                Ok((v, FitStatus::Boundary)) => (Some(v), UnitStatus::Boundary),
                Ok((v, _)) => (Some(v), UnitStatus::Ok),
                Err(_) => (None, UnitStatus::Failed),
            };
            Imputation {
                pi0,
                model: "adjusted-saturated".into(),
                status,
                squared_sum: None,
            }
        }
    })
    .map(|mut imp| {
        if imp.pi0.is_some_and(|v| !v.is_finite() || v < 0.0) {
            imp.pi0 = None;
            imp.status = UnitStatus::Failed;
        }
        imp
    })
}

fn covariate_key(x: &[f64]) -> Vec<u64> {
    // +0.0 and -0.0 share a kernel profile
    x.iter().map(|v| if *v == 0.0 { 0 } else { v.to_bits() }).collect()
}

fn summarize_ids(ids: &[&str]) -> String {
    const SHOWN: usize = 10;
    let mut s = ids.iter().take(SHOWN).copied().collect::<Vec<_>>().join(", ");
    if ids.len() > SHOWN {
        s.push_str(&format!(", ... ({} more)", ids.len() - SHOWN));
    }
    s
}

/// Runs the two-stage pipeline: kernel-smoothed local tables, then a
/// zero-cell imputation per unit, summed into `n_hat`.
///
/// Units sharing a covariate vector share their local table and imputation.
/// Failed imputations contribute 0 and mark the report partial.
pub fn smooth_poststrat_estimate(dataset: &Dataset, cfg: &PipelineConfig) -> Result<EstimateReport> {
    let k = dataset.k();
    if let Some(mk) = cfg.imputer.k() {
        if mk != k {
            return Err(Error::InvalidArgument(format!(
                "imputer is defined on {mk} lists, data has {k}"
            )));
        }
    }
    if !(cfg.psi_floor > 0.0 && cfg.psi_floor <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "psi floor {} outside (0, 1]",
            cfg.psi_floor
        )));
    }

    let mut groups: Vec<usize> = Vec::new();
    let mut group_of = vec![0usize; dataset.n_c()];
    let bandwidth;
    let group_results: Vec<(Vec<f64>, f64, Imputation)>;

    if cfg.global {
        bandwidth = None;
        let dist = cross_classify(dataset).to_distribution()?;
        let eta = dataset.n_c() as f64;
        let imp = impute(&cfg.imputer, &dist, eta)?;
        groups.push(0);
        group_results = vec![(dist.probs().to_vec(), eta, imp)];
    } else {
        cfg.bandwidth.validate(dataset.q())?;
        let values = resolve_bandwidth(dataset, &cfg.bandwidth)?;
        let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
        for (i, u) in dataset.units().iter().enumerate() {
            let g = *seen.entry(covariate_key(&u.covariates)).or_insert_with(|| {
                groups.push(i);
                groups.len() - 1
            });
            group_of[i] = g;
        }
        group_results = groups
            .par_iter()
            .map(|&i| {
                let wp = profile_from_values(dataset, i, cfg.bandwidth.kernel, &values);
                let dist = local_distribution(dataset, &wp);
                let imp = impute(&cfg.imputer, &dist, wp.eta)?;
                Ok((dist.probs().to_vec(), wp.eta, imp))
            })
            .collect::<Result<Vec<_>>>()?;
        bandwidth = Some(values);
    }

    let max_pi0 = 1.0 / cfg.psi_floor - 1.0;
    let mut per_unit = Vec::with_capacity(dataset.n_c());
    for (i, u) in dataset.units().iter().enumerate() {
        let (dist, eta, imp) = &group_results[group_of[i]];
        let mut pi0 = imp.pi0.unwrap_or(0.0);
        let clamped = pi0 > max_pi0;
        if clamped {
            pi0 = max_pi0;
        }
        per_unit.push(UnitEstimate {
            id: u.id.clone(),
            x: u.covariates.clone(),
            pi0,
            psi: detection_prob(pi0),
            model: imp.model.clone(),
            dist: dist.clone(),
            eta: *eta,
            status: imp.status,
            clamped,
            excluded: false,
        });
    }

    let mut warnings = Vec::new();
    let ids_where = |f: &dyn Fn(usize, &UnitEstimate) -> bool| -> Vec<&str> {
        per_unit
            .iter()
            .enumerate()
            .filter(|(i, u)| f(*i, u))
            .map(|(_, u)| u.id.as_str())
            .collect()
    };
    let failed = ids_where(&|_, u| u.status == UnitStatus::Failed);
    if !failed.is_empty() {
        warnings.push(format!(
            "{} unit imputations failed and count as 0: {}",
            failed.len(),
            summarize_ids(&failed)
        ));
    }
    let boundary = ids_where(&|_, u| u.status == UnitStatus::Boundary);
    if !boundary.is_empty() {
        warnings.push(format!(
            "{} unit fits stopped at the coefficient bound (fitted cells near 0): {}",
            boundary.len(),
            summarize_ids(&boundary)
        ));
    }
    let clamped = ids_where(&|_, u| u.clamped);
    if !clamped.is_empty() {
        warnings.push(format!(
            "{} units had detection probability below the floor {} and were clamped: {}",
            clamped.len(),
            cfg.psi_floor,
            summarize_ids(&clamped)
        ));
    }
    let negative_sq = ids_where(&|i, _| group_results[group_of[i]].2.squared_sum.is_some_and(|v| v < 0.0));
    if !negative_sq.is_empty() {
        warnings.push(format!(
            "{} units have a negative squared-sum coefficient: {}",
            negative_sq.len(),
            summarize_ids(&negative_sq)
        ));
    }

    let mut report = EstimateReport {
        n_hat: 0.0,
        c0_hat: 0.0,
        n_c: dataset.n_c(),
        model: cfg.imputer.to_string(),
        bandwidth,
        per_unit,
        warnings,
        partial: false,
        config: ConfigEcho {
            imputer: cfg.imputer.to_string(),
            global: cfg.global,
            kernel: cfg.bandwidth.kernel,
            bandwidth_method: cfg.bandwidth.method,
            psi_floor: cfg.psi_floor,
            lists: dataset.list_labels().to_vec(),
            covariates: dataset.covariate_labels().to_vec(),
            restriction: None,
        },
    };
    report.retotal();
    if let Some(region) = &cfg.region {
        if region.covariate >= dataset.q() {
            return Err(Error::InvalidArgument(format!("region `{region}` names a missing covariate")));
        }
        report = restrict_region(&report, &region.to_string(), |x| region.contains(x));
    }
    Ok(report)
}

/// Zeroes the imputations of units whose covariates fall outside the
/// region and recomputes the totals.
pub fn restrict_region(
    report: &EstimateReport,
    description: &str,
    inside: impl Fn(&[f64]) -> bool,
) -> EstimateReport {
    let mut out = report.clone();
    let mut excluded = 0;
    for u in &mut out.per_unit {
        if !inside(&u.x) {
            u.pi0 = 0.0;
            u.psi = 1.0;
            u.excluded = true;
            excluded += 1;
        }
    }
    out.retotal();
    out.warnings.push(format!(
        "imputations restricted to {description}: {excluded} of {} units excluded",
        out.n_c
    ));
    out.config.restriction = Some(match &report.config.restriction {
        Some(prev) => format!("{prev} and {description}"),
        None => description.to_string(),
    });
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Comparison {
    Less,
    LessEq,
    Greater,
    GreaterEq,
}

/// A half-line in one covariate, e.g. `rank<150`.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub covariate: usize,
    pub label: String,
    pub op: Comparison,
    pub value: f64,
}

impl Region {
    /// Parses `<name><op><number>` with `op` one of `<`, `<=`, `>`, `>=`.
    /// The name `x` means the first covariate.
    pub fn parse(expr: &str, covariate_labels: &[String]) -> Result<Self> {
        let expr: String = expr.chars().filter(|c| !c.is_whitespace()).collect();
        let pos = expr
            .find(['<', '>'])
            .ok_or_else(|| Error::InvalidArgument(format!("region `{expr}` has no comparison")))?;
        let (name, rest) = expr.split_at(pos);
        let (op, num) = if let Some(n) = rest.strip_prefix("<=") {
            (Comparison::LessEq, n)
        } else if let Some(n) = rest.strip_prefix(">=") {
            (Comparison::GreaterEq, n)
        } else if let Some(n) = rest.strip_prefix('<') {
            (Comparison::Less, n)
        } else {
            (Comparison::Greater, &rest[1..])
        };
        let value: f64 = num
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("region bound `{num}` is not a number")))?;
        let covariate = match covariate_labels.iter().position(|l| l == name) {
            Some(c) => c,
            None if name == "x" && !covariate_labels.is_empty() => 0,
            None => {
                return Err(Error::InvalidArgument(format!(
                    "region names unknown covariate `{name}`"
                )))
            }
        };
        Ok(Self {
            covariate,
            label: name.to_string(),
            op,
            value,
        })
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        let v = x[self.covariate];
        match self.op {
            Comparison::Less => v < self.value,
            Comparison::LessEq => v <= self.value,
            Comparison::Greater => v > self.value,
            Comparison::GreaterEq => v >= self.value,
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match self.op {
            Comparison::Less => "<",
            Comparison::LessEq => "<=",
            Comparison::Greater => ">",
            Comparison::GreaterEq => ">=",
        };
        write!(f, "{}{}{}", self.label, op, self.value)
    }
}
