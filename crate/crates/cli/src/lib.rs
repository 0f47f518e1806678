//! Command-line driver for `smoothcr`.

pub mod curves;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use smoothcr::bootstrap::{CaptureProb, CovariateDist, SyntheticSpec};
use smoothcr::json::to_json_string_pretty;
use smoothcr::{
    bootstrap_ci, cross_classify, fixtures, rank_covariate, read_csv_path, simulate_synthetic,
    smooth_poststrat_estimate, BandwidthConfig, BootstrapResult, ConfigEcho, CsvSchema,
    Dataset, EstimateReport, Imputer, Kernel, LogLinearModel, LscvGrid, PipelineConfig, Region, SelectionConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FATAL: i32 = 1;
pub const EXIT_PARTIAL: i32 = 2;

/// Name that selects the bundled bird survey data instead of a file.
pub const BIRDS: &str = "@birds";

#[derive(Parser, Debug)]
#[command(
    name = "smoothcr",
    version,
    about = "Population size from overlapping lists by smooth post-stratification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate a data file and print its cross-classification
    Ingest(IngestArgs),
    /// Estimate the population size
    Estimate(EstimateArgs),
    /// Bootstrap standard error and percentile interval for the unobserved count
    Bootstrap(BootstrapArgs),
    /// Generate a synthetic capture-recapture data set
    Simulate(SimulateArgs),
}

#[derive(Args, Debug, Clone)]
pub struct InputArgs {
    /// CSV file, or `@birds` for the bundled bird survey data
    #[arg(long, short)]
    pub input: String,
    /// 0/1 list columns, in order
    #[arg(long, value_delimiter = ',')]
    pub lists: Vec<String>,
    /// Numeric covariate columns
    #[arg(long, value_delimiter = ',')]
    pub covariates: Vec<String>,
    /// Unit id column (default: `id` if present, else the row number)
    #[arg(long)]
    pub id_column: Option<String>,
    /// Append a `rank` covariate: units ordered by how many lists they are on
    #[arg(long)]
    pub rank_covariate: bool,
}

#[derive(Args, Debug, Clone)]
pub struct IngestArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Write the JSON summary here
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum KernelArg {
    Gaussian,
    Boxcar,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Lscv,
    Fixed,
}

#[derive(Args, Debug, Clone)]
pub struct PipelineArgs {
    /// independence, saturated, equal-catch, quasi-symmetry, intercept,
    /// adjusted-saturated, select-bic, select-aicc, or a term list like `1,2,3,12`
    #[arg(long, default_value = "independence")]
    pub model: String,
    /// Fit one model to the whole table instead of per unit
    #[arg(long)]
    pub global: bool,
    #[arg(long, value_enum, default_value_t = KernelArg::Gaussian)]
    pub kernel: KernelArg,
    /// Defaults to `fixed` when --bandwidth is given, else `lscv`
    #[arg(long, value_enum)]
    pub bandwidth_method: Option<MethodArg>,
    /// One bandwidth per covariate; `inf` disables smoothing in that covariate
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub bandwidth: Vec<f64>,
    /// Grid size for cross-validated bandwidth selection
    #[arg(long, default_value_t = 20)]
    pub lscv_points: usize,
    /// Smallest allowed detection probability
    #[arg(long, default_value_t = smoothcr::estimators::DEFAULT_PSI_FLOOR)]
    pub psi_floor: f64,
    /// Only count imputations inside this region, e.g. `rank<150`
    #[arg(long)]
    pub restrict: Option<String>,
    /// Candidate models for select-bic/select-aicc; repeat or separate with `;`
    #[arg(long, value_delimiter = ';')]
    pub candidates: Vec<String>,
}

#[derive(Args, Debug, Clone)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Write the JSON report here (default: stdout, summary on stderr)
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    /// Write stacked per-unit curves as CSV
    #[arg(long)]
    pub emit_curves: Option<PathBuf>,
    /// Covariate that orders the curve rows (default: the first)
    #[arg(long)]
    pub curve_covariate: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct BootstrapArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Number of replicates
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(2..))]
    pub reps: u64,
    /// Interval coverage
    #[arg(long, default_value_t = 0.9)]
    pub level: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct SimulateArgs {
    /// JSON generator spec; overrides --n and --capture-prob
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Population size
    #[arg(long, required_unless_present = "spec")]
    pub n: Option<usize>,
    /// Constant capture probability per list; covariate is uniform on [0, 1]
    #[arg(long, value_delimiter = ',')]
    pub capture_prob: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// CSV output path
    #[arg(long, short)]
    pub output: PathBuf,
    /// Ground-truth JSON path (default: next to the CSV)
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

/// Loads the data named by `args`.
pub fn load_dataset(args: &InputArgs) -> Result<Dataset> {
    let ds = if args.input == BIRDS {
        let mut schema = fixtures::birds_schema();
        if !args.lists.is_empty() {
            schema.lists = args.lists.clone();
        }
        if !args.covariates.is_empty() {
            schema.covariates = args.covariates.clone();
        } else if args.rank_covariate {
            schema.covariates.clear();
        }
        smoothcr::read_csv(fixtures::BIRDS_CSV.as_bytes(), &schema)?
    } else {
        if args.lists.len() < 2 {
            bail!("--lists needs at least two list columns");
        }
        let schema = CsvSchema {
            id_column: args.id_column.clone(),
            covariates: args.covariates.clone(),
            lists: args.lists.clone(),
        };
        read_csv_path(&args.input, &schema).with_context(|| format!("reading {}", args.input))?
    };
    if args.rank_covariate {
        if ds.covariate_index("rank").is_some() {
            bail!("data already has a `rank` covariate");
        }
        return Ok(rank_covariate(&ds));
    }
    Ok(ds)
}

/// Builds the pipeline configuration for `ds`.
pub fn pipeline_config(args: &PipelineArgs, ds: &Dataset) -> Result<PipelineConfig> {
    let k = ds.k();
    let mut imputer = Imputer::parse(&args.model, k)?;
    if !args.candidates.is_empty() {
        let Imputer::Select(sel) = &imputer else {
            bail!("--candidates only applies to select-bic and select-aicc");
        };
        let models = args
            .candidates
            .iter()
            .filter(|c| !c.trim().is_empty())
            .map(|c| LogLinearModel::parse(c, k))
            .collect::<smoothcr::Result<Vec<_>>>()?;
        imputer = Imputer::Select(SelectionConfig::new(sel.criterion, models)?);
    }
    let kernel = match args.kernel {
        KernelArg::Gaussian => Kernel::Gaussian,
        KernelArg::Boxcar => Kernel::Boxcar,
    };
    let method = args.bandwidth_method.unwrap_or(if args.bandwidth.is_empty() {
        MethodArg::Lscv
    } else {
        MethodArg::Fixed
    });
    let mut cfg = if args.global {
        PipelineConfig::global(imputer)
    } else {
        let bandwidth = match method {
            MethodArg::Fixed => {
                if args.bandwidth.is_empty() {
                    bail!("--bandwidth-method fixed needs --bandwidth");
                }
                BandwidthConfig::fixed(args.bandwidth.clone(), kernel)
            }
            MethodArg::Lscv => {
                if !args.bandwidth.is_empty() {
                    bail!("--bandwidth conflicts with --bandwidth-method lscv");
                }
                BandwidthConfig::lscv(kernel).with_grid(LscvGrid::LogSpaced {
                    points: args.lscv_points,
                })
            }
        };
        bandwidth.validate(ds.q())?;
        PipelineConfig::new(bandwidth, imputer)
    };
    cfg.psi_floor = args.psi_floor;
    if let Some(r) = &args.restrict {
        cfg.region = Some(Region::parse(r, ds.covariate_labels())?);
    }
    Ok(cfg)
}

fn write_output(json: &str, summary: &str, output: Option<&Path>) -> Result<()> {
    match output {
        Some(path) => {
            fs::write(path, format!("{json}\n")).with_context(|| format!("writing {}", path.display()))?;
            print!("{summary}");
        }
        None => {
            println!("{json}");
            eprint!("{summary}");
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct CellCount {
    pattern: String,
    count: f64,
}

#[derive(Serialize)]
struct IngestSummary {
    n_c: usize,
    lists: Vec<String>,
    covariates: Vec<String>,
    counts: Vec<CellCount>,
}

pub fn run_ingest(args: &IngestArgs) -> Result<i32> {
    let ds = load_dataset(&args.input)?;
    let cc = cross_classify(&ds);
    let summary = IngestSummary {
        n_c: ds.n_c(),
        lists: ds.list_labels().to_vec(),
        covariates: ds.covariate_labels().to_vec(),
        counts: cc
            .iter()
            .map(|(p, c)| CellCount {
                pattern: p.to_string(),
                count: c,
            })
            .collect(),
    };
    let mut text = format!(
        "{} units on {} lists ({}), {} covariates ({})\n",
        ds.n_c(),
        ds.k(),
        ds.list_labels().join(", "),
        ds.q(),
        ds.covariate_labels().join(", ")
    );
    for c in &summary.counts {
        text.push_str(&format!("  {}  {}\n", c.pattern, c.count));
    }
    write_output(&to_json_string_pretty(&summary)?, &text, args.output.as_deref())?;
    Ok(EXIT_OK)
}

fn fmt_bandwidth(b: &Option<Vec<f64>>) -> String {
    match b {
        Some(v) => v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(", "),
        None => "none (global fit)".into(),
    }
}

fn estimate_summary(report: &EstimateReport) -> String {
    let mut s = format!(
        "n_c        {}\nc0_hat     {:.4}\nn_hat      {:.4}\nmodel      {}\nbandwidth  {}\n",
        report.n_c,
        report.c0_hat,
        report.n_hat,
        report.model,
        fmt_bandwidth(&report.bandwidth)
    );
    if report.partial {
        s.push_str("PARTIAL: some unit imputations failed\n");
    }
    for w in &report.warnings {
        s.push_str(&format!("warning: {w}\n"));
    }
    s
}

pub fn run_estimate(args: &EstimateArgs) -> Result<i32> {
    let ds = load_dataset(&args.input)?;
    let cfg = pipeline_config(&args.pipeline, &ds)?;
    let report = smooth_poststrat_estimate(&ds, &cfg)?;
    if let Some(path) = &args.emit_curves {
        let by = match &args.curve_covariate {
            Some(name) => Some(
                ds.covariate_index(name)
                    .ok_or_else(|| anyhow!("unknown curve covariate `{name}`"))?,
            ),
            None => (ds.q() > 0).then_some(0),
        };
        let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        curves::emit_curves(&report, by, std::io::BufWriter::new(file))?;
    }
    write_output(
        &to_json_string_pretty(&report)?,
        &estimate_summary(&report),
        args.output.as_deref(),
    )?;
    Ok(if report.partial { EXIT_PARTIAL } else { EXIT_OK })
}

#[derive(Serialize)]
struct BootstrapReport {
    n_c: usize,
    n_hat: f64,
    #[serde(flatten)]
    result: BootstrapResult,
    model: String,
    bandwidth: Option<Vec<f64>>,
    config: ConfigEcho,
}

pub fn run_bootstrap(args: &BootstrapArgs) -> Result<i32> {
    if !(args.level > 0.0 && args.level < 1.0) {
        bail!("--level must be in (0, 1)");
    }
    let ds = load_dataset(&args.input)?;
    let cfg = pipeline_config(&args.pipeline, &ds)?;
    let base = smooth_poststrat_estimate(&ds, &cfg)?;
    let result = bootstrap_ci(&ds, &cfg, args.reps as usize, args.level, args.seed)?;
    let summary = format!(
        "c0_hat     {:.4}\nse         {:.4}\n{:.0}% CI    ({:.4}, {:.4})\nreplicates {} ({} failed), seed {}\n",
        result.c0_hat,
        result.se,
        100.0 * args.level,
        result.ci.0,
        result.ci.1,
        result.b,
        result.failed,
        result.seed
    );
    let out = BootstrapReport {
        n_c: base.n_c,
        n_hat: base.n_hat,
        result,
        model: base.model,
        bandwidth: base.bandwidth,
        config: base.config,
    };
    write_output(&to_json_string_pretty(&out)?, &summary, args.output.as_deref())?;
    Ok(EXIT_OK)
}

pub fn run_simulate(args: &SimulateArgs) -> Result<i32> {
    let spec = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<SyntheticSpec>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => {
            if args.capture_prob.len() < 2 {
                bail!("--capture-prob needs one probability per list (at least two)");
            }
            SyntheticSpec {
                n: args.n.expect("required by clap"),
                covariate: CovariateDist::Uniform { lo: 0.0, hi: 1.0 },
                lists: args.capture_prob.iter().map(|p| CaptureProb::Constant { p: *p }).collect(),
            }
        }
    };
    let (ds, truth) = simulate_synthetic(&spec, args.seed)?;
    let file = fs::File::create(&args.output).with_context(|| format!("creating {}", args.output.display()))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let mut header = vec!["id".to_string()];
    header.extend(ds.covariate_labels().iter().cloned());
    header.extend(ds.list_labels().iter().cloned());
    w.write_record(&header)?;
    for u in ds.units() {
        let mut row = vec![u.id.clone()];
        row.extend(u.covariates.iter().map(|v| smoothcr::json::format_g17(*v)));
        row.extend(u.pattern.bits().iter().map(|b| b.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    let truth_path = args
        .truth
        .clone()
        .unwrap_or_else(|| args.output.with_extension("truth.json"));
    let mut f = fs::File::create(&truth_path).with_context(|| format!("creating {}", truth_path.display()))?;
    writeln!(f, "{}", to_json_string_pretty(&truth)?)?;
    println!(
        "simulated n = {}, observed n_c = {}, unobserved c0 = {}\nwrote {} and {}",
        truth.n,
        truth.n_c,
        truth.c0,
        args.output.display(),
        truth_path.display()
    );
    Ok(EXIT_OK)
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return EXIT_FATAL;
        }
    }
    let result = match &cli.command {
        Command::Ingest(a) => run_ingest(a),
        Command::Estimate(a) => run_estimate(a),
        Command::Bootstrap(a) => run_bootstrap(a),
        Command::Simulate(a) => run_simulate(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_FATAL
        }
    }
}
