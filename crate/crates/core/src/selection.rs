//! Per-unit model choice by localized information criteria.

use serde::{Deserialize, Serialize};

use crate::data::{n_cells, PatternDistribution};
use crate::error::{Error, Result};
use crate::loglinear::{pmml_fit, FitStatus, LocalFit, LogLinearModel, Term};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Bic,
    Aicc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Search {
    /// Score every candidate.
    Exhaustive,
    /// Score the candidates, then grow the independence model one
    /// hierarchical interaction at a time while the criterion improves.
    Stepwise,
}

/// Above this many lists the hierarchical family is searched stepwise.
pub const EXHAUSTIVE_MAX_LISTS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionConfig {
    pub criterion: Criterion,
    pub candidates: Vec<LogLinearModel>,
    pub search: Search,
}

impl SelectionConfig {
    pub fn new(criterion: Criterion, candidates: Vec<LogLinearModel>) -> Result<Self> {
        let Some(first) = candidates.first() else {
            return Err(Error::InvalidArgument("no candidate models".into()));
        };
        let k = first.k();
        if candidates.iter().any(|m| m.k() != k) {
            return Err(Error::InvalidArgument(
                "candidate models disagree on the number of lists".into(),
            ));
        }
        Ok(Self {
            criterion,
            candidates,
            search: Search::Exhaustive,
        })
    }

    /// Intercept-only, equal catchability, and the hierarchical models that
    /// contain every list effect (exhaustive up to
    /// [`EXHAUSTIVE_MAX_LISTS`] lists, stepwise beyond).
    pub fn default_for(k: usize, criterion: Criterion) -> Self {
        let mut candidates = vec![LogLinearModel::intercept_only(k), LogLinearModel::equal_catch(k)];
        let search = if k <= EXHAUSTIVE_MAX_LISTS {
            candidates.extend(hierarchical_family(k));
            Search::Exhaustive
        } else {
            candidates.push(LogLinearModel::independence(k));
            Search::Stepwise
        };
        Self {
            criterion,
            candidates,
            search,
        }
    }

    pub fn k(&self) -> usize {
        self.candidates[0].k()
    }
}

/// `-2 log L + q log eta`.
pub fn bic_score(fit: &LocalFit) -> f64 {
    -2.0 * fit.loglik + fit.q as f64 * fit.eta.ln()
}

/// `-2 log L + 2q + 2(q+1)(q+2)/(eta - q - 2)`; undefined unless `eta > q + 2`.
pub fn aicc_score(fit: &LocalFit) -> Result<f64> {
    let q = fit.q as f64;
    let denom = fit.eta - q - 2.0;
    if denom <= 0.0 {
        return Err(Error::InadmissibleModel { q: fit.q, eta: fit.eta });
    }
    Ok(-2.0 * fit.loglik + 2.0 * q + 2.0 * (q + 1.0) * (q + 2.0) / denom)
}

pub fn score(fit: &LocalFit, criterion: Criterion) -> Option<f64> {
    match criterion {
        Criterion::Bic => Some(bic_score(fit)),
        Criterion::Aicc => aicc_score(fit).ok(),
    }
}

fn interaction_masks(k: usize) -> Vec<u32> {
    let full = n_cells(k) as u32;
    let mut masks: Vec<u32> = (1..full).filter(|m| m.count_ones() >= 2).collect();
    masks.sort_by_key(|m| (m.count_ones(), std::cmp::Reverse(*m)));
    masks
}

/// Every proper subset of `mask` with at least two lists is in `present`.
fn closed_under_subsets(mask: u32, present: &[u32]) -> bool {
    let mut sub = (mask - 1) & mask;
    while sub != 0 {
        if sub.count_ones() >= 2 && !present.contains(&sub) {
            return false;
        }
        sub = (sub - 1) & mask;
    }
    true
}

fn hierarchical_model(k: usize, interactions: &[u32]) -> LogLinearModel {
    if interactions.is_empty() {
        return LogLinearModel::independence(k);
    }
    if interactions.len() == interaction_masks(k).len() {
        return LogLinearModel::saturated(k);
    }
    let mut terms: Vec<Term> = (0..k).map(|j| Term::Interaction(1 << (k - 1 - j))).collect();
    terms.extend(interactions.iter().map(|m| Term::Interaction(*m)));
    LogLinearModel::from_terms(k, terms).expect("hierarchical model is valid")
}

/// Hierarchical models with all list effects and without the `k`-way
/// interaction, ordered by size. Intended for small `k`.
pub fn hierarchical_family(k: usize) -> Vec<LogLinearModel> {
    let masks = interaction_masks(k);
    let mut sets: Vec<Vec<u32>> = Vec::new();
    for bits in 0u64..(1u64 << masks.len()) {
        let chosen: Vec<u32> = masks
            .iter()
            .enumerate()
            .filter(|(i, _)| bits >> i & 1 == 1)
            .map(|(_, m)| *m)
            .collect();
        if chosen.iter().all(|m| closed_under_subsets(*m, &chosen)) {
            sets.push(chosen);
        }
    }
    sets.sort_by_key(|s| s.len());
    sets.iter().map(|s| hierarchical_model(k, s)).collect()
}

struct Scored {
    fit: LocalFit,
    score: f64,
    order: usize,
}

fn better(a: &Scored, b: &Scored) -> bool {
    let tol = 1e-9 * a.score.abs().max(b.score.abs()).max(1.0);
    if (a.score - b.score).abs() > tol {
        return a.score < b.score;
    }
    (a.fit.q, a.order) < (b.fit.q, b.order)
}

fn consider(best: &mut Option<Scored>, cand: Scored) {
    match best {
        Some(b) if !better(&cand, b) => {}
        _ => *best = Some(cand),
    }
}

fn evaluate(
    model: &LogLinearModel,
    dist: &PatternDistribution,
    eta: f64,
    criterion: Criterion,
    order: usize,
) -> Result<Option<Scored>> {
    let fit = pmml_fit(model, dist, eta)?;
    if fit.status == FitStatus::Failed {
        return Ok(None);
    }
    Ok(score(&fit, criterion).map(|score| Scored { fit, score, order }))
}

/// Fits the admissible candidates and returns the criterion minimizer.
///
/// Ties (within `1e-9` relative) go to fewer parameters, then to earlier
/// candidates. Failed fits are skipped; fits stopped at the coefficient
/// bound stay eligible. With nothing admissible, the intercept-only model
/// is returned.
pub fn select_local_model(dist: &PatternDistribution, eta: f64, cfg: &SelectionConfig) -> Result<LocalFit> {
    let k = cfg.k();
    if dist.k() != k {
        return Err(Error::InvalidArgument(format!(
            "candidates on {k} lists, distribution on {}",
            dist.k()
        )));
    }
    let mut best: Option<Scored> = None;
    for (order, model) in cfg.candidates.iter().enumerate() {
        if let Some(s) = evaluate(model, dist, eta, cfg.criterion, order)? {
            consider(&mut best, s);
        }
    }

    if cfg.search == Search::Stepwise {
        let masks = interaction_masks(k);
        let mut present: Vec<u32> = Vec::new();
        let mut current = evaluate(&hierarchical_model(k, &[]), dist, eta, cfg.criterion, usize::MAX)?;
        let mut order = cfg.candidates.len();
        while let Some(cur) = current.take() {
            let mut step: Option<(Scored, u32)> = None;
            for &m in masks.iter().filter(|m| !present.contains(m)) {
                if !closed_under_subsets(m, &present) {
                    continue;
                }
                let mut next = present.clone();
                next.push(m);
                order += 1;
                if let Some(s) = evaluate(&hierarchical_model(k, &next), dist, eta, cfg.criterion, order)? {
                    if step.as_ref().is_none_or(|(b, _)| better(&s, b)) {
                        step = Some((s, m));
                    }
                }
            }
            match step {
                Some((s, m)) if better(&s, &cur) => {
                    present.push(m);
                    consider(&mut best, cur);
                    current = Some(s);
                }
                _ => consider(&mut best, cur),
            }
        }
    }

    match best {
        Some(s) => Ok(s.fit),
        None => pmml_fit(&LogLinearModel::intercept_only(k), dist, eta),
    }
}
