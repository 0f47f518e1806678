//! Parametric bootstrap for `c0_hat` and synthetic populations for
//! validation.

use rand::distr::weighted::WeightedIndex;
use rand::distr::{Bernoulli, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CapturePattern, Dataset, ObservedUnit, MAX_LISTS};
use crate::error::{Error, Result};
use crate::estimators::{smooth_poststrat_estimate, EstimateReport, PipelineConfig};

/// Largest fraction of bootstrap replicates allowed to fail.
pub const MAX_FAILED_FRACTION: f64 = 0.1;

/// A simulated population: observed units plus inserted copies, each with
/// probabilities over all `2^k` capture patterns indexed by mask (index 0 is
/// the all-zero pattern).
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedPopulation {
    pub list_labels: Vec<String>,
    pub covariate_labels: Vec<String>,
    pub ids: Vec<String>,
    pub covariates: Vec<Vec<f64>>,
    pub r_hat: Vec<Vec<f64>>,
}

impl SimulatedPopulation {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn k(&self) -> usize {
        self.list_labels.len()
    }
}

fn full_pattern_row(psi: f64, dist: &[f64]) -> Vec<f64> {
    let mut row = Vec::with_capacity(dist.len() + 1);
    row.push(1.0 - psi);
    row.extend(dist.iter().map(|p| psi * p));
    row
}

/// Each observed unit stands for `o_i = 1 / psi_i - 1` unobserved ones:
/// `floor(o_i)` copies are inserted, plus one more with probability equal
/// to the fractional part.
pub fn expand_population<R: Rng + ?Sized>(report: &EstimateReport, rng: &mut R) -> SimulatedPopulation {
    let mut pop = SimulatedPopulation {
        list_labels: report.config.lists.clone(),
        covariate_labels: report.config.covariates.clone(),
        ids: Vec::new(),
        covariates: Vec::new(),
        r_hat: Vec::new(),
    };
    for u in &report.per_unit {
        let o = (1.0 / u.psi - 1.0).max(0.0);
        let whole = o.floor();
        let frac = o - whole;
        let extra = frac > 0.0 && Bernoulli::new(frac).expect("fraction in [0, 1)").sample(rng);
        let copies = whole as usize + extra as usize;
        let row = full_pattern_row(u.psi, &u.dist);
        for c in 0..=copies {
            pop.ids.push(if c == 0 {
                u.id.clone()
            } else {
                format!("{}~{c}", u.id)
            });
            pop.covariates.push(u.x.clone());
            pop.r_hat.push(row.clone());
        }
    }
    pop
}

/// Draws one pattern per unit from its `r_hat` row and keeps the captured
/// units. Errors with `EmptySample` when nobody is captured.
pub fn simulate_capture<R: Rng + ?Sized>(pop: &SimulatedPopulation, rng: &mut R) -> Result<Dataset> {
    let k = pop.k();
    let mut units = Vec::new();
    for ((id, x), row) in pop.ids.iter().zip(&pop.covariates).zip(&pop.r_hat) {
        let cell = WeightedIndex::new(row)
            .map_err(|e| Error::InvalidArgument(format!("bad pattern probabilities for `{id}`: {e}")))?
            .sample(rng);
        if cell == 0 {
            continue;
        }
        units.push(ObservedUnit::new(id.clone(), x.clone(), CapturePattern::from_mask(cell as u32, k)?)?);
    }
    if units.is_empty() {
        return Err(Error::EmptySample);
    }
    Dataset::new(pop.list_labels.clone(), pop.covariate_labels.clone(), units)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    /// `c0_hat` on the original data.
    pub c0_hat: f64,
    /// `c0_hat` of each successful replicate, in replicate order.
    pub replicates: Vec<f64>,
    /// `n_hat` of each successful replicate.
    pub n_hat_replicates: Vec<f64>,
    /// Standard deviation of the `c0_hat` replicates.
    pub se: f64,
    /// Percentile interval for `n`, shifted by the observed `n_c` onto the
    /// scale of `c0`.
    pub ci: (f64, f64),
    pub level: f64,
    pub b: usize,
    pub seed: u64,
    pub failed: usize,
}

fn replicate_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Percentile bootstrap for the unobserved count.
///
/// Each replicate expands the fitted population, resimulates captures and
/// reruns the full pipeline, including bandwidth selection when the config
/// asks for it. Replicate `b` draws from stream `b` of `seed`, so results do
/// not depend on scheduling.
///
/// The interval is taken on `n_hat` and shifted by the known `n_c`. In a
/// replicate the simulated count of unobserved units varies along with its
/// estimate, so quantiles of the replicate `c0_hat` alone are too narrow
/// for the realized `c0`.
pub fn bootstrap_ci(
    dataset: &Dataset,
    cfg: &PipelineConfig,
    b: usize,
    level: f64,
    seed: u64,
) -> Result<BootstrapResult> {
    if b < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 replicates, got {b}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("level {level} outside (0, 1)")));
    }
    let base = smooth_poststrat_estimate(dataset, cfg)?;
    let outcomes: Vec<Option<(f64, f64)>> = (0..b)
        .into_par_iter()
        .map(|r| {
            let mut rng = replicate_rng(seed, r);
            let pop = expand_population(&base, &mut rng);
            let sim = simulate_capture(&pop, &mut rng).ok()?;
            smooth_poststrat_estimate(&sim, cfg).ok().map(|rep| (rep.c0_hat, rep.n_hat))
        })
        .collect();
    let (replicates, n_hat_replicates): (Vec<f64>, Vec<f64>) = outcomes.iter().flatten().copied().unzip();
    let failed = b - replicates.len();
    if failed as f64 > MAX_FAILED_FRACTION * b as f64 || replicates.len() < 2 {
        return Err(Error::BootstrapFailure { failed, reps: b });
    }
    let mut sorted = n_hat_replicates.clone();
    sorted.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let n_c = dataset.n_c() as f64;
    Ok(BootstrapResult {
        c0_hat: base.c0_hat,
        se: sample_sd(&replicates),
        ci: (quantile(&sorted, tail) - n_c, quantile(&sorted, 1.0 - tail) - n_c),
        replicates,
        n_hat_replicates,
        level,
        b,
        seed,
        failed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum CovariateDist {
    Uniform { lo: f64, hi: f64 },
    Normal { mean: f64, sd: f64 },
    Constant { value: f64 },
}

/// Capture probability on one list as a function of the covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum CaptureProb {
    Constant { p: f64 },
    /// `1 / (1 + exp(-(intercept + slope x)))`
    Logistic { intercept: f64, slope: f64 },
}

impl CaptureProb {
    pub fn at(&self, x: f64) -> f64 {
        match self {
            CaptureProb::Constant { p } => *p,
            CaptureProb::Logistic { intercept, slope } => 1.0 / (1.0 + (-(intercept + slope * x)).exp()),
        }
    }
}

/// A population of `n` units with one covariate, captured independently on
/// each list given the covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub covariate: CovariateDist,
    pub lists: Vec<CaptureProb>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidArgument("population size must be positive".into()));
        }
        if !(2..=MAX_LISTS).contains(&self.lists.len()) {
            return Err(Error::InvalidArgument(format!(
                "need between 2 and {MAX_LISTS} lists, got {}",
                self.lists.len()
            )));
        }
        for c in &self.lists {
            match c {
                CaptureProb::Constant { p } if !(0.0..=1.0).contains(p) => {
                    return Err(Error::InvalidArgument(format!("capture probability {p} outside [0, 1]")))
                }
                CaptureProb::Logistic { intercept, slope } if !(intercept.is_finite() && slope.is_finite()) => {
                    return Err(Error::InvalidArgument("logistic coefficients must be finite".into()))
                }
                _ => {}
            }
        }
        let ok = match self.covariate {
            CovariateDist::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo < hi,
            CovariateDist::Normal { mean, sd } => mean.is_finite() && sd.is_finite() && sd > 0.0,
            CovariateDist::Constant { value } => value.is_finite(),
        };
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "invalid covariate distribution {:?}",
                self.covariate
            )));
        }
        Ok(())
    }

    /// Probability of appearing on at least one list at covariate `x`.
    pub fn detection_prob(&self, x: f64) -> f64 {
        1.0 - self.lists.iter().map(|c| 1.0 - c.at(x)).product::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub n: usize,
    pub n_c: usize,
    pub c0: usize,
    /// True detection probability of each observed unit, in dataset order.
    pub psi: Vec<f64>,
    pub spec: SyntheticSpec,
    pub seed: u64,
}

/// Generates a population from `spec` and returns the captured units with
/// the ground truth. List labels are `L1..Lk` and the covariate is `x`.
pub fn simulate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(Dataset, SyntheticTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = spec.lists.len();
    let mut units = Vec::new();
    let mut psi = Vec::new();
    for i in 0..spec.n {
        let x = match spec.covariate {
            CovariateDist::Uniform { lo, hi } => Uniform::new(lo, hi).expect("validated").sample(&mut rng),
            CovariateDist::Normal { mean, sd } => Normal::new(mean, sd).expect("validated").sample(&mut rng),
            CovariateDist::Constant { value } => value,
        };
        let bits: Vec<u8> = spec.lists.iter().map(|c| rng.random_bool(c.at(x)) as u8).collect();
        let pattern = CapturePattern::new(&bits)?;
        if pattern.is_nonzero() {
            units.push(ObservedUnit::new(format!("s{:06}", i + 1), vec![x], pattern)?);
            psi.push(spec.detection_prob(x));
        }
    }
    if units.is_empty() {
        return Err(Error::EmptySample);
    }
    let n_c = units.len();
    let ds = Dataset::new(
        (1..=k).map(|j| format!("L{j}")).collect(),
        vec!["x".into()],
        units,
    )?;
    Ok((
        ds,
        SyntheticTruth {
            n: spec.n,
            n_c,
            c0: spec.n - n_c,
            psi,
            spec: spec.clone(),
            seed,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{collapse_lists, cross_classify, n_cells};
    use crate::estimators::{petersen, Imputer, UnitEstimate};
    use crate::smoother::{BandwidthConfig, Kernel};

    fn report_with(psi: &[f64], dist: Vec<f64>) -> EstimateReport {
        let k = (dist.len() + 1).trailing_zeros() as usize;
        let ds = Dataset::new(
            (0..k).map(|j| format!("L{j}")).collect(),
            vec!["x".into()],
            psi.iter()
                .enumerate()
                .map(|(i, _)| {
                    ObservedUnit::new(format!("u{i}"), vec![i as f64], CapturePattern::from_mask(n_cells(k) as u32, k).unwrap())
                        .unwrap()
                })
                .collect(),
        )
        .unwrap();
        let cfg = PipelineConfig::new(
            BandwidthConfig::fixed(vec![1.0], Kernel::Gaussian),
            Imputer::parse("independence", k).unwrap(),
        );
        let mut r = smooth_poststrat_estimate(&ds, &cfg).unwrap();
        r.per_unit = psi
            .iter()
            .enumerate()
            .map(|(i, p)| UnitEstimate {
                id: format!("u{i}"),
                x: vec![i as f64],
                pi0: 1.0 / p - 1.0,
                psi: *p,
                model: "test".into(),
                dist: dist.clone(),
                eta: 1.0,
                status: Default::default(),
                clamped: false,
                excluded: false,
            })
            .collect();
        r
    }

    #[test]
    fn expansion_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = vec![1.0 / 3.0; 3];
        assert_eq!(expand_population(&report_with(&[1.0; 40], d.clone()), &mut rng).len(), 40);
        assert_eq!(expand_population(&report_with(&[0.5; 40], d.clone()), &mut rng).len(), 80);
        let r = report_with(&[0.4; 50], d);
        let reps = 400;
        let sizes: Vec<f64> = (0..reps).map(|_| expand_population(&r, &mut rng).len() as f64).collect();
        let mean = sizes.iter().sum::<f64>() / reps as f64;
        // n_sim = 100 + Binomial(50, 1/2)
        let se = (50.0f64 * 0.25).sqrt() / (reps as f64).sqrt();
        assert!((mean - 125.0).abs() < 3.0 * se, "{mean}");
        assert!(sizes.iter().all(|s| (100.0..=150.0).contains(s)));
    }

    #[test]
    fn r_hat_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = vec![0.1, 0.2, 0.7];
        let pop = expand_population(&report_with(&[0.8, 0.25], d.clone()), &mut rng);
        for row in &pop.r_hat {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
        let row = &pop.r_hat[0];
        assert!((row[0] - 0.2).abs() < 1e-15);
        for j in 0..3 {
            assert!((row[j + 1] - 0.8 * d[j]).abs() < 1e-15);
        }
    }

    #[test]
    fn capture_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut d = vec![0.0; 7];
        d[6] = 1.0;
        let pop = expand_population(&report_with(&[1.0; 25], d), &mut rng);
        let ds = simulate_capture(&pop, &mut rng).unwrap();
        assert_eq!(ds.n_c(), 25);
        assert!(ds.units().iter().all(|u| u.pattern.mask() == 0b111));
        let mut empty = pop.clone();
        for row in &mut empty.r_hat {
            row.iter_mut().for_each(|v| *v = 0.0);
            row[0] = 1.0;
        }
        assert!(matches!(simulate_capture(&empty, &mut rng), Err(Error::EmptySample)));
    }

    #[test]
    fn capture_fraction_independence() {
        // each list with probability 1/2: every pattern has probability 1/8
        let n = 200;
        let pop = SimulatedPopulation {
            list_labels: vec!["a".into(), "b".into(), "c".into()],
            covariate_labels: vec![],
            ids: (0..n).map(|i| i.to_string()).collect(),
            covariates: vec![vec![]; n],
            r_hat: vec![vec![0.125; 8]; n],
        };
        let seeds = 200;
        let fracs: Vec<f64> = (0..seeds)
            .map(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                simulate_capture(&pop, &mut rng).unwrap().n_c() as f64 / n as f64
            })
            .collect();
        let mean = fracs.iter().sum::<f64>() / seeds as f64;
        let se = (7.0 / 64.0 / n as f64).sqrt() / (seeds as f64).sqrt();
        assert!((mean - 7.0 / 8.0).abs() < 3.0 * se, "{mean}");
    }

    #[test]
    fn expected_population_matches_n_hat() {
        let birds = crate::fixtures::birds();
        let cfg = PipelineConfig::new(
            BandwidthConfig::fixed(vec![27.0], Kernel::Gaussian),
            Imputer::parse("independence", 3).unwrap(),
        );
        let r = smooth_poststrat_estimate(&birds, &cfg).unwrap();
        let reps = 300;
        let mut total = 0.0;
        let mut cells = vec![0.0; 7];
        for s in 0..reps {
            let mut rng = replicate_rng(77, s);
            let pop = expand_population(&r, &mut rng);
            total += pop.len() as f64;
            for (c, v) in cells.iter_mut().zip(cross_classify(&simulate_capture(&pop, &mut rng).unwrap()).counts()) {
                *c += v;
            }
        }
        let mean = total / reps as f64;
        // Var(n_sim) = sum of Bernoulli variances of the fractional parts
        let var: f64 = r
            .per_unit
            .iter()
            .map(|u| {
                let o = 1.0 / u.psi - 1.0;
                let f = o - o.floor();
                f * (1.0 - f)
            })
            .sum();
        assert!((mean - r.n_hat).abs() <= 3.0 * (var / reps as f64).sqrt() + 1e-9, "{mean} vs {}", r.n_hat);
        // expected cell counts: sum_i (1 + o_i) psi_i pi_i(y) = sum_i pi_i(y)
        for (y, c) in cells.iter().enumerate() {
            let expected: f64 = r.per_unit.iter().map(|u| (1.0 + (1.0 / u.psi - 1.0)) * u.psi * u.dist[y]).sum();
            let sd = (expected * (1.0 - expected / r.n_hat) / reps as f64).sqrt() + 0.05;
            assert!((c / reps as f64 - expected).abs() < 3.0 * sd + 0.02 * expected, "cell {y}");
        }
    }

    #[test]
    fn always_captured_gives_zero_se() {
        let rows: Vec<ObservedUnit> = (0..30)
            .map(|i| ObservedUnit::new(format!("u{i}"), vec![i as f64], CapturePattern::from_mask(0b111, 3).unwrap()).unwrap())
            .collect();
        let ds = Dataset::new(vec!["a".into(), "b".into(), "c".into()], vec!["x".into()], rows).unwrap();
        let cfg = PipelineConfig::new(
            BandwidthConfig::fixed(vec![3.0], Kernel::Gaussian),
            Imputer::parse("independence", 3).unwrap(),
        );
        let res = bootstrap_ci(&ds, &cfg, 20, 0.9, 5).unwrap();
        assert!(res.replicates.iter().all(|v| v.abs() < 1e-9));
        assert!(res.n_hat_replicates.iter().all(|v| (v - 30.0).abs() < 1e-9));
        assert!(res.se < 1e-9);
        assert!(res.ci.0.abs() < 1e-9 && res.ci.1.abs() < 1e-9);
    }

    #[test]
    fn bootstrap_deterministic_and_argument_checks() {
        let spec = SyntheticSpec {
            n: 300,
            covariate: CovariateDist::Uniform { lo: 0.0, hi: 1.0 },
            lists: vec![CaptureProb::Constant { p: 0.6 }, CaptureProb::Constant { p: 0.5 }],
        };
        let (ds, _) = simulate_synthetic(&spec, 4).unwrap();
        let cfg = PipelineConfig::new(
            BandwidthConfig::fixed(vec![f64::INFINITY], Kernel::Boxcar),
            Imputer::parse("saturated", 2).unwrap(),
        );
        let a = bootstrap_ci(&ds, &cfg, 30, 0.9, 11).unwrap();
        let b = bootstrap_ci(&ds, &cfg, 30, 0.9, 11).unwrap();
        assert_eq!(a, b);
        let c = bootstrap_ci(&ds, &cfg, 30, 0.9, 12).unwrap();
        assert_ne!(a.replicates, c.replicates);
        assert!(bootstrap_ci(&ds, &cfg, 1, 0.9, 1).is_err());
        assert!(bootstrap_ci(&ds, &cfg, 10, 1.0, 1).is_err());
    }

    #[test]
    fn quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 5.0);
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert!((quantile(&v, 0.05) - 1.2).abs() < 1e-12);
        assert!((sample_sd(&v) - 2.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn synthetic_counts() {
        let spec = SyntheticSpec {
            n: 1000,
            covariate: CovariateDist::Normal { mean: 0.0, sd: 1.0 },
            lists: vec![CaptureProb::Constant { p: 0.5 }; 3],
        };
        let seeds = 100;
        let mean = (0..seeds)
            .map(|s| simulate_synthetic(&spec, s).unwrap().0.n_c() as f64)
            .sum::<f64>()
            / seeds as f64;
        let se = (1000.0f64 * 7.0 / 64.0).sqrt() / (seeds as f64).sqrt();
        assert!((mean - 875.0).abs() < 3.0 * se, "{mean}");

        let all = SyntheticSpec {
            lists: vec![CaptureProb::Constant { p: 1.0 }; 2],
            ..spec.clone()
        };
        let (ds, truth) = simulate_synthetic(&all, 1).unwrap();
        assert_eq!(ds.n_c(), 1000);
        assert_eq!(truth.c0, 0);
        assert!(truth.psi.iter().all(|p| *p == 1.0));

        let bad = SyntheticSpec {
            lists: vec![CaptureProb::Constant { p: 1.5 }; 2],
            ..spec
        };
        assert!(simulate_synthetic(&bad, 1).is_err());
        assert_eq!(simulate_synthetic(&all, 9).unwrap().0, simulate_synthetic(&all, 9).unwrap().0);
    }

    #[test]
    fn correlated_heterogeneity_biases_petersen_down() {
        let spec = SyntheticSpec {
            n: 2000,
            covariate: CovariateDist::Normal { mean: 0.0, sd: 1.5 },
            lists: vec![
                CaptureProb::Logistic { intercept: -0.5, slope: 1.5 },
                CaptureProb::Logistic { intercept: -0.5, slope: 1.5 },
                CaptureProb::Logistic { intercept: -0.5, slope: 1.5 },
            ],
        };
        let mut below = 0;
        for s in 0..20 {
            let (ds, truth) = simulate_synthetic(&spec, s).unwrap();
            let pair = collapse_lists(&cross_classify(&ds), (0, 1)).unwrap();
            let observed = pair.observed_total();
            let n_pet = observed + petersen(&pair).unwrap();
            if n_pet < truth.n as f64 {
                below += 1;
            }
        }
        assert_eq!(below, 20);
    }

    #[test]
    fn spec_json_roundtrip() {
        let spec = SyntheticSpec {
            n: 10,
            covariate: CovariateDist::Uniform { lo: 0.0, hi: 2.0 },
            lists: vec![
                CaptureProb::Constant { p: 0.3 },
                CaptureProb::Logistic { intercept: 0.1, slope: -1.0 },
            ],
        };
        let s = serde_json::to_string(&spec).unwrap();
        assert!(s.contains("\"type\":\"logistic\""));
        assert_eq!(serde_json::from_str::<SyntheticSpec>(&s).unwrap(), spec);
    }
}
