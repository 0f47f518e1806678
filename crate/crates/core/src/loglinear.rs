//! Log-linear models over capture patterns and their pseudo-multinomial
//! maximum-likelihood fits.
//!
//! Models are parameterized in multinomial-logit form over the nonzero cells:
//! `log pi(y; u) = x(y) . u - log Z(u)`, `Z(u) = sum_{z != 0} exp(x(z) . u)`.
//! The intercept is absorbed by the normalization, so the fitted cell
//! probabilities always sum to one. Every term vanishes at the zero
//! pattern, which makes the extrapolated zero cell `pi(0) = 1 / Z(u)`.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::data::{n_cells, nonzero_patterns, CapturePattern, CrossClassification, PatternDistribution};
use crate::error::{Error, Result};

/// Convergence threshold on the sup-norm of the objective gradient.
pub const GRADIENT_TOL: f64 = 1e-9;
pub const MAX_NEWTON_ITER: usize = 200;
/// Coefficients beyond this magnitude mean the maximum is at infinity.
pub const COEFFICIENT_BOUND: f64 = 30.0;
/// Fitted probability below which an empty cell counts as separated.
pub const SEPARATION_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Term {
    /// Product of the indicators of the lists in the mask (same bit layout
    /// as [`CapturePattern`]). Singletons are list effects.
    Interaction(u32),
    /// One shared list effect: regressor `sum_j y_j`.
    EqualCatch,
    /// Regressor `(sum_j y_j)^2`.
    SquaredSum,
}

impl Term {
    fn regressor(&self, y: CapturePattern) -> f64 {
        match *self {
            Term::Interaction(mask) => (y.mask() & mask == mask) as u8 as f64,
            Term::EqualCatch => y.total() as f64,
            Term::SquaredSum => (y.total() * y.total()) as f64,
        }
    }

    fn label(&self, k: usize) -> String {
        match *self {
            Term::Interaction(mask) => {
                let lists: Vec<String> = (0..k)
                    .filter(|j| mask >> (k - 1 - j) & 1 == 1)
                    .map(|j| (j + 1).to_string())
                    .collect();
                if k <= 9 {
                    lists.concat()
                } else {
                    lists.join(":")
                }
            }
            Term::EqualCatch => "sum".into(),
            Term::SquaredSum => "sumsq".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogLinearModel {
    k: usize,
    terms: Vec<Term>,
    name: String,
}

impl LogLinearModel {
    pub fn new(k: usize, terms: Vec<Term>, name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if !(2..=crate::data::MAX_LISTS).contains(&k) {
            return Err(Error::InvalidModel(format!("unsupported list count {k}")));
        }
        let full = n_cells(k) as u32;
        let mut seen = std::collections::HashSet::new();
        for t in &terms {
            if !seen.insert(*t) {
                return Err(Error::InvalidModel(format!("duplicate term `{}`", t.label(k))));
            }
            if let Term::Interaction(mask) = *t {
                if mask == 0 || mask > full {
                    return Err(Error::InvalidModel(format!("term mask {mask:#b} invalid for {k} lists")));
                }
                if mask == full {
                    return Err(Error::InvalidModel(format!(
                        "the {k}-way interaction leaves the missing cell unidentified"
                    )));
                }
            }
        }
        let has_singleton = terms
            .iter()
            .any(|t| matches!(t, Term::Interaction(m) if m.count_ones() == 1));
        if has_singleton && terms.contains(&Term::EqualCatch) {
            return Err(Error::InvalidModel(
                "equal catchability replaces the individual list effects".into(),
            ));
        }
        if terms.len() > n_cells(k) - 1 {
            return Err(Error::InvalidModel(format!(
                "{} free parameters exceed the {} identifiable on {k} lists",
                terms.len(),
                n_cells(k) - 1
            )));
        }
        Ok(Self { k, terms, name })
    }

    /// Built from explicit terms; the name is the term list.
    pub fn from_terms(k: usize, terms: Vec<Term>) -> Result<Self> {
        let name = if terms.is_empty() {
            "intercept".to_string()
        } else {
            terms.iter().map(|t| t.label(k)).collect::<Vec<_>>().join(",")
        };
        Self::new(k, terms, name)
    }

    /// Equal weight on every observable pattern; never needs fitting.
    pub fn intercept_only(k: usize) -> Self {
        Self::new(k, vec![], "intercept").expect("always valid")
    }

    pub fn independence(k: usize) -> Self {
        let terms = (0..k).map(|j| Term::Interaction(1 << (k - 1 - j))).collect();
        Self::new(k, terms, "independence").expect("always valid")
    }

    /// All interactions except the `k`-way one. Fits any table exactly.
    pub fn saturated(k: usize) -> Self {
        let full = n_cells(k) as u32;
        let mut masks: Vec<u32> = (1..full).collect();
        masks.sort_by_key(|m| (m.count_ones(), std::cmp::Reverse(*m)));
        let terms = masks.into_iter().map(Term::Interaction).collect();
        Self::new(k, terms, "saturated").expect("always valid")
    }

    pub fn equal_catch(k: usize) -> Self {
        Self::new(k, vec![Term::EqualCatch], "equal-catch").expect("always valid")
    }

    /// List effects plus a `(sum_j y_j)^2` term. Needs `k >= 3`.
    pub fn quasi_symmetry(k: usize) -> Result<Self> {
        let mut terms: Vec<Term> = (0..k).map(|j| Term::Interaction(1 << (k - 1 - j))).collect();
        terms.push(Term::SquaredSum);
        Self::new(k, terms, "quasi-symmetry")
    }

    /// Parses a model name (`independence`, `saturated`, `equal-catch`,
    /// `quasi-symmetry`, `intercept`) or a comma-separated term list such as
    /// `1,2,3,12`. In term lists each digit names a list (use `:` between
    /// list numbers when there are more than nine lists); `sum` is the
    /// shared list effect and `sumsq` the squared-sum regressor.
    pub fn parse(spec: &str, k: usize) -> Result<Self> {
        match spec.trim() {
            "independence" => return Ok(Self::independence(k)),
            "saturated" => return Ok(Self::saturated(k)),
            "equal-catch" | "equal_catch" => return Ok(Self::equal_catch(k)),
            "quasi-symmetry" | "quasi_symmetry" => return Self::quasi_symmetry(k),
            "intercept" | "intercept-only" => return Ok(Self::intercept_only(k)),
            _ => {}
        }
        let mut terms = Vec::new();
        for tok in spec.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let term = match tok {
                "sum" => Term::EqualCatch,
                "sumsq" => Term::SquaredSum,
                _ => {
                    let lists: Vec<usize> = if tok.contains(':') {
                        tok.split(':')
                            .map(|s| s.parse::<usize>())
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|_| Error::InvalidModel(format!("bad term `{tok}`")))?
                    } else {
                        tok.chars()
                            .map(|c| c.to_digit(10).map(|d| d as usize))
                            .collect::<Option<_>>()
                            .ok_or_else(|| Error::InvalidModel(format!("unknown model or term `{tok}`")))?
                    };
                    let mut mask = 0u32;
                    for j in lists {
                        if j == 0 || j > k {
                            return Err(Error::InvalidModel(format!(
                                "term `{tok}` names list {j}, but there are {k}"
                            )));
                        }
                        mask |= 1 << (k - j);
                    }
                    Term::Interaction(mask)
                }
            };
            terms.push(term);
        }
        if terms.is_empty() {
            return Err(Error::InvalidModel(format!("empty model spec `{spec}`")));
        }
        Self::from_terms(k, terms)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Free coefficients, not counting the normalizing intercept.
    pub fn n_params(&self) -> usize {
        self.terms.len()
    }

    /// True when every interaction's lower-order interactions are also
    /// present and no special terms are used.
    pub fn is_hierarchical(&self) -> bool {
        let masks: Vec<u32> = self
            .terms
            .iter()
            .filter_map(|t| match t {
                Term::Interaction(m) => Some(*m),
                _ => None,
            })
            .collect();
        if masks.len() != self.terms.len() {
            return false;
        }
        masks.iter().all(|&m| {
            // every proper nonempty subset of m
            let mut sub = (m - 1) & m;
            while sub != 0 {
                if !masks.contains(&sub) {
                    return false;
                }
                sub = (sub - 1) & m;
            }
            true
        })
    }

    /// Regressors for one pattern, in term order. The intercept is omitted.
    pub fn design_row(&self, y: CapturePattern) -> Vec<f64> {
        self.terms.iter().map(|t| t.regressor(y)).collect()
    }

    /// Design over all nonzero patterns, row `mask - 1`.
    pub fn design(&self) -> Design {
        let rows = n_cells(self.k);
        let cols = self.terms.len();
        let mut data = vec![0.0; rows * cols];
        for p in nonzero_patterns(self.k) {
            let r = p.cell_index();
            for (c, t) in self.terms.iter().enumerate() {
                data[r * cols + c] = t.regressor(p);
            }
        }
        Design { rows, cols, data }
    }
}

impl fmt::Display for LogLinearModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// Row-major design matrix over the nonzero cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Design {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn linear_predictor(&self, u: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(u).map(|(x, b)| x * b).sum())
            .collect()
    }
}

/// Variable part of the pseudo-multinomial log-likelihood,
/// `eta * sum_y p(y) log pi(y; u)`, as a function of the coefficients.
pub struct PmmlObjective<'a> {
    design: &'a Design,
    target: &'a [f64],
    eta: f64,
}

impl<'a> PmmlObjective<'a> {
    pub fn new(design: &'a Design, target: &'a PatternDistribution, eta: f64) -> Self {
        Self {
            design,
            target: target.probs(),
            eta,
        }
    }

    /// Fitted cell probabilities and `log Z(u)`.
    pub fn fitted(&self, u: &[f64]) -> (Vec<f64>, f64) {
        let s = self.design.linear_predictor(u);
        let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = s.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        (s.iter().map(|v| (v - log_z).exp()).collect(), log_z)
    }

    pub fn value(&self, u: &[f64]) -> f64 {
        let s = self.design.linear_predictor(u);
        let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + s.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let fit: f64 = self
            .target
            .iter()
            .zip(&s)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, v)| p * v)
            .sum();
        self.eta * (fit - log_z)
    }

    /// `eta * X^T (p - pi(u))`.
    pub fn gradient(&self, u: &[f64]) -> Vec<f64> {
        let (pi, _) = self.fitted(u);
        self.gradient_at(&pi)
    }

    fn gradient_at(&self, pi: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.design.cols];
        for r in 0..self.design.rows {
            let resid = self.target[r] - pi[r];
            for (gc, x) in g.iter_mut().zip(self.design.row(r)) {
                *gc += resid * x;
            }
        }
        g.iter_mut().for_each(|v| *v *= self.eta);
        g
    }

    /// Negated Hessian, `eta * (X^T diag(pi) X - m m^T)` with `m = X^T pi`.
    /// Positive semidefinite.
    pub fn information(&self, u: &[f64]) -> DMatrix<f64> {
        let (pi, _) = self.fitted(u);
        self.information_at(&pi)
    }

    fn information_at(&self, pi: &[f64]) -> DMatrix<f64> {
        let p = self.design.cols;
        let mut mean = vec![0.0; p];
        let mut second = DMatrix::<f64>::zeros(p, p);
        for r in 0..self.design.rows {
            let x = self.design.row(r);
            for a in 0..p {
                mean[a] += pi[r] * x[a];
                for b in 0..=a {
                    second[(a, b)] += pi[r] * x[a] * x[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..=a {
                let v = self.eta * (second[(a, b)] - mean[a] * mean[b]);
                second[(a, b)] = v;
                second[(b, a)] = v;
            }
        }
        second
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitStatus {
    Converged,
    /// A coefficient passed [`COEFFICIENT_BOUND`]: some fitted cell
    /// probability is heading to zero and the maximum is at infinity. The
    /// reported values are those at the point where iteration stopped.
    Boundary,
    Failed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalFit {
    pub model: LogLinearModel,
    pub coefficients: Vec<f64>,
    /// Fitted probabilities over the nonzero cells, indexed by `mask - 1`.
    pub fitted: Vec<f64>,
    /// Extrapolated zero cell, `pi(0; u) = 1 / Z(u)`.
    pub pi0: f64,
    /// Log pseudo-likelihood including the Gamma-function constant.
    pub loglik: f64,
    pub eta: f64,
    pub q: usize,
    pub status: FitStatus,
    pub iterations: usize,
}

impl LocalFit {
    pub fn succeeded(&self) -> bool {
        self.status != FitStatus::Failed
    }

    /// The intercept `u_0 = -log Z`, i.e. `log pi(0; u)`.
    pub fn intercept(&self) -> f64 {
        self.pi0.ln()
    }
}

/// `log Gamma(eta + 1) - sum_y log Gamma(eta p(y) + 1)`.
pub fn multinomial_log_constant(dist: &PatternDistribution, eta: f64) -> f64 {
    ln_gamma(eta + 1.0)
        - dist
            .probs()
            .iter()
            .map(|p| ln_gamma(eta * p + 1.0))
            .sum::<f64>()
}

fn solve_newton(info: DMatrix<f64>, g: &[f64]) -> Option<Vec<f64>> {
    let chol = info.cholesky()?;
    let step = chol.solve(&DVector::from_column_slice(g));
    step.iter().all(|v| v.is_finite()).then(|| step.iter().copied().collect())
}

/// Maximizes the pseudo-multinomial likelihood of `model` against the
/// smoothed distribution `dist` with `eta` pseudo-trials.
///
/// Damped Newton from `u = 0` with step halving; falls back to a gradient
/// step when the information matrix is singular. Never returns `Err` for
/// numerical trouble: the outcome is reported through [`LocalFit::status`].
pub fn pmml_fit(model: &LogLinearModel, dist: &PatternDistribution, eta: f64) -> Result<LocalFit> {
    if dist.k() != model.k() {
        return Err(Error::InvalidArgument(format!(
            "model on {} lists, distribution on {}",
            model.k(),
            dist.k()
        )));
    }
    if !(eta >= 1.0) || !eta.is_finite() {
        return Err(Error::InvalidArgument(format!("eta = {eta} must be finite and >= 1")));
    }
    let design = model.design();
    let obj = PmmlObjective::new(&design, dist, eta);
    let constant = multinomial_log_constant(dist, eta);
    let p = design.cols();

    let mut u = vec![0.0; p];
    let mut status = FitStatus::Failed;
    let mut iterations = 0;
    let mut current = obj.value(&u);

    if p == 0 {
        status = FitStatus::Converged;
    }
    while p > 0 && iterations < MAX_NEWTON_ITER {
        let (pi, _) = obj.fitted(&u);
        let g = obj.gradient_at(&pi);
        let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !gmax.is_finite() {
            break;
        }
        if gmax <= GRADIENT_TOL {
            status = FitStatus::Converged;
            // one more Newton step costs little and buys full precision
            if let Some(d) = solve_newton(obj.information_at(&pi), &g) {
                let trial: Vec<f64> = u.iter().zip(&d).map(|(a, b)| a + b).collect();
                let v = obj.value(&trial);
                let (tp, _) = obj.fitted(&trial);
                let tg = obj.gradient_at(&tp);
                if v.is_finite() && tg.iter().all(|x| x.abs() <= gmax) {
                    u = trial;
                    current = v;
                }
            }
            break;
        }
        iterations += 1;
        let direction = solve_newton(obj.information_at(&pi), &g).unwrap_or_else(|| {
            // gradient ascent, scaled to a per-trial step
            g.iter().map(|v| v / eta).collect()
        });

        let slack = 1e-12 * (1.0 + current.abs());
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = u.iter().zip(&direction).map(|(a, d)| a + t * d).collect();
            let v = obj.value(&trial);
            if v.is_finite() && v >= current - slack {
                accepted = Some((trial, v));
                break;
            }
            t *= 0.5;
        }
        let Some((next, v)) = accepted else {
            break;
        };
        let moved = next.iter().zip(&u).any(|(a, b)| a != b);
        u = next;
        current = v;
        if u.iter().any(|c| c.abs() > COEFFICIENT_BOUND) {
            status = FitStatus::Boundary;
            break;
        }
        if !moved {
            // No representable progress left; accept if the gradient is
            // at rounding level.
            let g = obj.gradient(&u);
            let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if gmax <= GRADIENT_TOL * eta.max(1.0) * 1e3 {
                status = FitStatus::Converged;
            }
            break;
        }
    }

    let (fitted, log_z) = obj.fitted(&u);
    let pi0 = (-log_z).exp();
    // A converged fit that drives an empty cell to ~0 sits on the boundary
    // of the parameter space: the MLE does not exist.
    if status == FitStatus::Converged
        && dist
            .probs()
            .iter()
            .zip(&fitted)
            .any(|(p, f)| *p == 0.0 && *f < SEPARATION_TOL)
    {
        status = FitStatus::Boundary;
    }
    if status != FitStatus::Failed && !(pi0.is_finite() && fitted.iter().all(|f| f.is_finite())) {
        status = FitStatus::Failed;
    }
    Ok(LocalFit {
        model: model.clone(),
        loglik: constant + current,
        coefficients: u,
        fitted,
        pi0,
        eta,
        q: p,
        status,
        iterations,
    })
}

/// The fitted zero-cell probability, `1 / Z(u_hat)`.
pub fn impute_zero(fit: &LocalFit) -> Result<f64> {
    match fit.status {
        FitStatus::Failed => Err(Error::NonConvergence(format!("model `{}`", fit.model.name()))),
        _ => Ok(fit.pi0),
    }
}

/// `prod_{odd} pi(y) / prod_{even, nonzero} pi(z)`, evaluated in log space.
pub fn odd_even_impute(dist: &PatternDistribution) -> Result<f64> {
    let mut log_ratio = 0.0;
    let mut odd_zero = false;
    for p in nonzero_patterns(dist.k()) {
        let v = dist.prob(p);
        if p.total() % 2 == 1 {
            if v == 0.0 {
                odd_zero = true;
            } else {
                log_ratio += v.ln();
            }
        } else {
            if v == 0.0 {
                return Err(Error::DivisionByZero(p.to_string()));
            }
            log_ratio -= v.ln();
        }
    }
    Ok(if odd_zero { 0.0 } else { log_ratio.exp() })
}

/// Conditional maximum-likelihood fit to a whole table.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalFit {
    pub fit: LocalFit,
    /// Estimated probability of the zero pattern in the full population.
    pub p0: f64,
    pub n_hat: f64,
    pub c0_hat: f64,
}

/// Fits `model` to raw counts by conditional maximum likelihood, then
/// maximizes the binomial marginal likelihood in `n`, giving
/// `n_hat = n_c / (1 - p0)` with `p0 = pi0 / (1 + pi0)`.
pub fn global_fit(cc: &CrossClassification, model: &LogLinearModel) -> Result<GlobalFit> {
    if cc.missing_cell().is_some() {
        return Err(Error::InvalidArgument("missing cell must be unset".into()));
    }
    if cc.counts().iter().any(|c| c.fract() != 0.0) {
        return Err(Error::InvalidArgument("global fit needs integer counts".into()));
    }
    let n_c = cc.observed_total();
    let dist = cc.to_distribution()?;
    let fit = pmml_fit(model, &dist, n_c)?;
    if fit.status == FitStatus::Failed {
        return Err(Error::NonConvergence(format!("global `{}` fit", model.name())));
    }
    let p0 = fit.pi0 / (1.0 + fit.pi0);
    Ok(GlobalFit {
        p0,
        n_hat: n_c * (1.0 + fit.pi0),
        c0_hat: n_c * fit.pi0,
        fit,
    })
}
