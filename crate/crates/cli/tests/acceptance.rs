//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use smoothcr::bootstrap::{CaptureProb, CovariateDist, SyntheticSpec};
use smoothcr::data::n_cells;
use smoothcr::loglinear::PmmlObjective;
use smoothcr::selection::hierarchical_family;
use smoothcr::*;

const BIN: &str = env!("CARGO_BIN_EXE_smoothcr");

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn run_cli(args: &[&str]) -> (i32, String) {
    let out = Command::new(BIN).args(args).output().expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn loglinear_dist(model: &LogLinearModel, u: &[f64]) -> PatternDistribution {
    let design = model.design();
    let w = (0..design.rows())
        .map(|r| design.row(r).iter().zip(u).map(|(x, b)| x * b).sum::<f64>().exp())
        .collect();
    PatternDistribution::from_weights(model.k(), w).unwrap()
}

fn birds_table(dir: &Path) -> Outcome {
    let t = Instant::now();
    let cc = cross_classify(&fixtures::birds());
    let elapsed = t.elapsed();
    let path = dir.join("ingest.json");
    let (code, err) = run_cli(&["ingest", "--input", "@birds", "--output", path.to_str().unwrap()]);
    if code != 0 {
        return outcome(false, format!("ingest exited {code}: {err}"));
    }
    let v = read_json(&path);
    let expected = [
        ("111", 581.0),
        ("110", 13.0),
        ("101", 11.0),
        ("100", 18.0),
        ("011", 10.0),
        ("010", 10.0),
        ("001", 21.0),
    ];
    let cli_counts: Vec<(String, f64)> = v["counts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| (c["pattern"].as_str().unwrap().to_string(), c["count"].as_f64().unwrap()))
        .collect();
    let lib_counts: Vec<(String, f64)> = cc.iter().map(|(p, c)| (p.to_string(), c)).collect();
    let want: Vec<(String, f64)> = expected.iter().map(|(p, c)| (p.to_string(), *c)).collect();
    let pass = cli_counts == want && lib_counts == want && v["n_c"] == 664 && elapsed < Duration::from_millis(100);
    outcome(pass, format!("n_c = {}, counts {:?}, {:?}", v["n_c"], cli_counts, elapsed))
}

fn global_quasi_symmetry(dir: &Path) -> Outcome {
    let path = dir.join("global_qs.json");
    let t = Instant::now();
    let (code, err) = run_cli(&[
        "estimate",
        "--input",
        "@birds",
        "--global",
        "--model",
        "quasi-symmetry",
        "--output",
        path.to_str().unwrap(),
    ]);
    let elapsed = t.elapsed();
    if code != 0 {
        return outcome(false, format!("estimate exited {code}: {err}"));
    }
    let c0 = read_json(&path)["c0_hat"].as_f64().unwrap();
    outcome(
        (c0 - 1744.0).abs() <= 1.0 && elapsed < Duration::from_secs(1),
        format!("c0_hat = {c0:.4} (target 1744 +/- 1), {elapsed:?}"),
    )
}

fn petersen_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = LogLinearModel::independence(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        // every cell >= 1: with an empty cell the MLE does not exist
        let c: Vec<f64> = (0..3).map(|_| rng.random_range(1..=1000) as f64).collect();
        let cc = CrossClassification::new(2, c.clone()).unwrap();
        let g = global_fit(&cc, &model).unwrap();
        // cells are indexed by mask - 1: [01, 10, 11]
        let p = c[0] * c[1] / c[2];
        worst = worst.max((g.c0_hat - p).abs() / p);
    }
    outcome(worst <= 1e-9, format!("max relative error {worst:.3e} over 1000 tables"))
}

fn odd_even_and_logit() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sat = LogLinearModel::saturated(3);
    let ind = LogLinearModel::independence(3);
    let mut worst_sat = 0.0f64;
    let mut worst_ind = 0.0f64;
    for _ in 0..1000 {
        let d = PatternDistribution::from_weights(3, (0..7).map(|_| rng.random_range(0.01..1.0)).collect()).unwrap();
        let eta = rng.random_range(10.0..1000.0);
        let a = impute_zero(&pmml_fit(&sat, &d, eta).unwrap()).unwrap();
        let b = odd_even_impute(&d).unwrap();
        worst_sat = worst_sat.max((a - b).abs() / b.max(1.0));

        let marg: Vec<f64> = (0..3).map(|_| rng.random_range(0.05..0.95)).collect();
        let full = |m: u32| {
            (0..3)
                .map(|j| if m >> (2 - j) & 1 == 1 { marg[j] } else { 1.0 - marg[j] })
                .product::<f64>()
        };
        let p0 = full(0);
        let di = PatternDistribution::from_weights(3, (1..8).map(full).collect()).unwrap();
        let v = impute_zero(&pmml_fit(&ind, &di, eta).unwrap()).unwrap();
        let closed = p0 / (1.0 - p0);
        worst_ind = worst_ind.max((v - closed).abs() / closed.max(1.0));
    }
    outcome(
        worst_sat <= 1e-8 && worst_ind <= 1e-6,
        format!("saturated vs odd/even {worst_sat:.3e}, independence vs closed form {worst_ind:.3e}"),
    )
}

fn boxcar_poststrat() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for trial in 0..40 {
        let k = if trial % 2 == 0 { 2 } else { 3 };
        let blocks = rng.random_range(2..6);
        let mut units = Vec::new();
        let mut oracle = 0.0;
        for b in 0..blocks {
            let mut counts = vec![0.0f64; n_cells(k)];
            let mut push = |mask: u32, counts: &mut Vec<f64>, rng: &mut ChaCha8Rng| {
                counts[mask as usize - 1] += 1.0;
                let x = 10.0 * b as f64 + rng.random::<f64>();
                units.push(ObservedUnit::new(format!("u{}", units.len()), vec![x], CapturePattern::from_mask(mask, k).unwrap()).unwrap());
            };
            for mask in 1..=n_cells(k) as u32 {
                push(mask, &mut counts, &mut rng);
            }
            for _ in 0..rng.random_range(5..60) {
                let mask = rng.random_range(1..=n_cells(k) as u32);
                push(mask, &mut counts, &mut rng);
            }
            // classical saturated estimate for the stratum: prod odd / prod even
            let (mut num, mut den) = (1.0, 1.0);
            for (i, c) in counts.iter().enumerate() {
                if (i as u32 + 1).count_ones() % 2 == 1 {
                    num *= c;
                } else {
                    den *= c;
                }
            }
            oracle += num / den;
        }
        let ds = Dataset::new((0..k).map(|j| format!("L{j}")).collect(), vec!["x".into()], units).unwrap();
        let cfg = PipelineConfig::new(
            BandwidthConfig::fixed(vec![1.0], Kernel::Boxcar),
            Imputer::parse("saturated", k).unwrap(),
        );
        let r = smooth_poststrat_estimate(&ds, &cfg).unwrap();
        worst = worst.max((r.c0_hat - oracle).abs() / oracle);
    }
    outcome(worst <= 1e-8, format!("max relative error {worst:.3e} over 40 stratified data sets"))
}

fn ht_unbiased() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 1000;
    let psi: Vec<f64> = (0..n).map(|_| rng.random_range(0.3..=0.9)).collect();
    let reps = 500;
    let est: Vec<f64> = (0..reps)
        .map(|_| {
            let seen: Vec<f64> = psi.iter().copied().filter(|p| rng.random_bool(*p)).collect();
            horvitz_thompson(&seen, 1e-3).unwrap().n_tilde
        })
        .collect();
    let mean = est.iter().sum::<f64>() / reps as f64;
    let sd = (est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
    let se = sd / (reps as f64).sqrt();
    outcome(
        (mean - n as f64).abs() <= 3.0 * se,
        format!("mean {mean:.3}, se {se:.3}, |mean - 1000| = {:.2} se", (mean - n as f64).abs() / se),
    )
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut models = hierarchical_family(3);
    models.push(LogLinearModel::equal_catch(3));
    models.push(LogLinearModel::quasi_symmetry(3).unwrap());
    models.extend(hierarchical_family(4).into_iter().step_by(11));
    let mut worst = 0.0f64;
    let h = 1e-5;
    for _ in 0..100 {
        let m = &models[rng.random_range(0..models.len())];
        let k = m.k();
        let d = PatternDistribution::from_weights(k, (0..n_cells(k)).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let eta = rng.random_range(1.0..500.0);
        let design = m.design();
        let obj = PmmlObjective::new(&design, &d, eta);
        let u: Vec<f64> = (0..m.n_params()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let g = obj.gradient(&u);
        let scale = g.iter().fold(1.0f64, |s, v| s.max(v.abs()));
        for j in 0..u.len() {
            let mut up = u.clone();
            let mut dn = u.clone();
            up[j] += h;
            dn[j] -= h;
            let fd = (obj.value(&up) - obj.value(&dn)) / (2.0 * h);
            worst = worst.max((g[j] - fd).abs() / scale);
        }
    }
    outcome(worst <= 1e-6, format!("max relative gradient error {worst:.3e} over 100 triples"))
}

fn selection_consistency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = LogLinearModel::parse("1,2,3,12", 3).unwrap();
    let truth = loglinear_dist(&model, &[-0.4, 0.2, 0.3, 1.0]);
    let cfg = SelectionConfig::default_for(3, Criterion::Bic);
    let eta = 500;
    let sampler = WeightedIndex::new(truth.probs()).unwrap();
    let trials = 200;
    let hits = (0..trials)
        .filter(|_| {
            let mut counts = vec![0.0; 7];
            for _ in 0..eta {
                counts[sampler.sample(&mut rng)] += 1.0;
            }
            let d = PatternDistribution::from_weights(3, counts).unwrap();
            let fit = select_local_model(&d, eta as f64, &cfg).unwrap();
            fit.model.terms().contains(&Term::Interaction(0b110))
        })
        .count();
    outcome(
        hits as f64 >= 0.9 * trials as f64,
        format!("{hits}/{trials} selected models contain the 12 interaction"),
    )
}

fn bootstrap_coverage() -> Outcome {
    let spec = SyntheticSpec {
        n: 400,
        covariate: CovariateDist::Constant { value: 0.0 },
        lists: vec![CaptureProb::Constant { p: 0.5 }, CaptureProb::Constant { p: 0.6 }],
    };
    let cfg = PipelineConfig::new(
        BandwidthConfig::fixed(vec![f64::INFINITY], Kernel::Boxcar),
        Imputer::parse("saturated", 2).unwrap(),
    );
    let outer = 200;
    let mut covered = 0;
    for s in 0..outer {
        let (ds, truth) = simulate_synthetic(&spec, 1000 + s).unwrap();
        let res = bootstrap_ci(&ds, &cfg, 200, 0.9, s).unwrap();
        let c0 = truth.c0 as f64;
        if res.ci.0 <= c0 && c0 <= res.ci.1 {
            covered += 1;
        }
    }
    let rate = covered as f64 / outer as f64;
    outcome(rate >= 0.85, format!("coverage {covered}/{outer} = {rate:.3} at nominal 0.90"))
}

fn birds_comparability() -> Outcome {
    let birds = fixtures::birds();
    let bw = BandwidthConfig::fixed(vec![27.0], Kernel::Gaussian);
    let ind = PipelineConfig::new(bw.clone(), Imputer::parse("independence", 3).unwrap());
    let boot = bootstrap_ci(&birds, &ind, 1000, 0.9, 2013).unwrap();
    let se_ok = boot.se >= 3.8 / 2.0 && boot.se <= 3.8 * 2.0;
    let ci_ok = boot.ci.0 <= 16.0 && boot.ci.1 >= 4.3;

    let mut qs = PipelineConfig::new(bw, Imputer::parse("quasi-symmetry", 3).unwrap());
    qs.region = Some(Region::parse("rank<150", birds.covariate_labels()).unwrap());
    let local = smooth_poststrat_estimate(&birds, &qs).unwrap();
    let qs_ok = local.c0_hat >= 85.0 / 2.0 && local.c0_hat <= 85.0 * 2.0;
    outcome(
        se_ok && ci_ok && qs_ok,
        format!(
            "independence se {:.3} (1.9..7.6), 90% CI ({:.3}, {:.3}) vs (4.3, 16); local quasi-symmetry rank<150 c0 {:.3} (42.5..170)",
            boot.se, boot.ci.0, boot.ci.1, local.c0_hat
        ),
    )
}

fn determinism(dir: &Path) -> Outcome {
    let runs: [(&str, &[&str]); 2] = [
        ("estimate", &["--model", "select-bic"]),
        ("bootstrap", &["--reps", "40", "--seed", "9"]),
    ];
    let mut detail = Vec::new();
    let mut pass = true;
    for (cmd, extra) in runs {
        let mut outputs = Vec::new();
        for (i, threads) in ["1", "4", "4", "2"].iter().enumerate() {
            let path = dir.join(format!("{cmd}-{i}.json"));
            let mut args = vec![cmd, "--input", "@birds", "--threads", threads, "--output", path.to_str().unwrap()];
            args.extend_from_slice(extra);
            let (code, err) = run_cli(&args);
            if code != 0 {
                return outcome(false, format!("{cmd} exited {code}: {err}"));
            }
            outputs.push(std::fs::read(&path).unwrap());
        }
        let same = outputs.windows(2).all(|w| w[0] == w[1]);
        pass &= same;
        detail.push(format!("{cmd}: {} bytes, identical = {same}", outputs[0].len()));
    }
    outcome(pass, detail.join("; "))
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().unwrap();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("1 birds table reconstruction", Box::new(|| birds_table(dir.path()))),
        ("2 global quasi-symmetry", Box::new(|| global_quasi_symmetry(dir.path()))),
        ("3 petersen equivalence", Box::new(petersen_equivalence)),
        ("4 odd/even and logit extrapolation", Box::new(odd_even_and_logit)),
        ("5 boxcar post-stratification", Box::new(boxcar_poststrat)),
        ("6 horvitz-thompson unbiasedness", Box::new(ht_unbiased)),
        ("7 likelihood gradient check", Box::new(gradient_check)),
        ("8 BIC selection consistency", Box::new(selection_consistency)),
        ("9 bootstrap calibration", Box::new(bootstrap_coverage)),
        ("10 bird survey comparability", Box::new(birds_comparability)),
        ("11 determinism", Box::new(|| determinism(dir.path()))),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        let t = Instant::now();
        let o = check();
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!("{status} criterion {name} [{:.2?}]: {}", t.elapsed(), o.detail);
        if !o.pass {
            failed += 1;
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
