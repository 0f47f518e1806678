//! Smooth post-stratification for multiple-list population size estimation.
//!
//! Stage 1 estimates the conditional capture-pattern probabilities
//! `pi(y, x)` of each observed unit with a kernel smoother over covariates
//! ([`smoother`]). Stage 2 fits a local log-linear model to each smoothed
//! table by pseudo-multinomial maximum likelihood ([`loglinear`],
//! [`selection`]) and imputes the unobserved-pattern probability. The
//! imputations are summed into a population size estimate ([`estimators`])
//! with a parametric bootstrap for its uncertainty ([`bootstrap`]).
//!
//! ```
//! use smoothcr::{fixtures, BandwidthConfig, Imputer, Kernel, PipelineConfig};
//!
//! let birds = fixtures::birds();
//! let cfg = PipelineConfig::new(
//!     BandwidthConfig::fixed(vec![27.0], Kernel::Gaussian),
//!     Imputer::parse("independence", 3).unwrap(),
//! );
//! let report = smoothcr::smooth_poststrat_estimate(&birds, &cfg).unwrap();
//! assert!(report.n_hat > 664.0);
//! ```

pub mod bootstrap;
pub mod data;
pub mod error;
pub mod estimators;
pub mod fixtures;
pub mod ingest;
pub mod json;
pub mod loglinear;
pub mod selection;
pub mod smoother;

pub use bootstrap::{
    bootstrap_ci, expand_population, simulate_capture, simulate_synthetic, BootstrapResult, CaptureProb,
    CovariateDist, SimulatedPopulation, SyntheticSpec, SyntheticTruth,
};
pub use data::{
    collapse_lists, cross_classify, rank_covariate, CapturePattern, CrossClassification, Dataset, ObservedUnit,
    PatternDistribution,
};
pub use error::{Error, Result};
pub use estimators::{
    adjusted_saturated_impute, detection_prob, horvitz_thompson, petersen, restrict_region,
    smooth_poststrat_estimate, ConfigEcho, EstimateReport, Imputer, PipelineConfig, Region, UnitEstimate,
};
pub use ingest::{read_csv, read_csv_path, CsvSchema};
pub use loglinear::{global_fit, impute_zero, odd_even_impute, pmml_fit, FitStatus, GlobalFit, LocalFit, LogLinearModel, Term};
pub use selection::{select_local_model, Criterion, Search, SelectionConfig};
pub use smoother::{
    kernel_weights, local_distribution, lscv_risk, resolve_bandwidth, select_bandwidth, BandwidthConfig,
    BandwidthMethod, Kernel, LscvGrid, WeightProfile,
};
