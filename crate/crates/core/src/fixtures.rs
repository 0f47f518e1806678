//! Bundled data.

use crate::data::Dataset;
use crate::ingest::{read_csv, CsvSchema};

/// Species-by-year detections from a North American breeding bird survey,
/// 2009-2011. Species identities are synthetic; the cross-classification is
/// the published one. The `rank` column orders species by number of years
/// observed (least-observed first, ties in file order).
pub const BIRDS_CSV: &str = include_str!("../data/birds.csv");

pub const BIRDS_LISTS: [&str; 3] = ["y2009", "y2010", "y2011"];

pub fn birds_schema() -> CsvSchema {
    CsvSchema {
        id_column: Some("id".into()),
        covariates: vec!["rank".into()],
        lists: BIRDS_LISTS.iter().map(|s| s.to_string()).collect(),
    }
}

/// The birds data with the `rank` covariate.
pub fn birds() -> Dataset {
    read_csv(BIRDS_CSV.as_bytes(), &birds_schema()).expect("bundled fixture parses")
}
