//! CSV ingestion.
//!
//! The header names the columns. List columns hold `0`/`1`, covariate
//! columns hold finite reals, and an optional id column labels each row.
//! Rows are numbered from 1 (the header is row 0) in error messages.

use std::io::Read;
use std::path::Path;

use crate::data::{CapturePattern, Dataset, ObservedUnit};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct CsvSchema {
    /// Id column. When `None`, ids are taken from a column named `id` if the
    /// header has one, else from the row number.
    pub id_column: Option<String>,
    pub covariates: Vec<String>,
    pub lists: Vec<String>,
}

pub fn read_csv_path(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema)
}

pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<Dataset> {
    if schema.lists.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 list columns, got {}",
            schema.lists.len()
        )));
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let list_cols = schema.lists.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
    let cov_cols = schema
        .covariates
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;
    let id_col = match &schema.id_column {
        Some(name) => Some(find(name)?),
        None => headers.iter().position(|h| h == "id"),
    };

    let mut units = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let row = r + 1;
        let record = record?;
        let field = |col: usize, name: &str| -> Result<&str> {
            match record.get(col) {
                Some(v) if !v.is_empty() => Ok(v),
                _ => Err(Error::Parse {
                    row,
                    column: name.to_string(),
                    message: "missing value".into(),
                }),
            }
        };
        let mut bits = Vec::with_capacity(list_cols.len());
        for (&col, name) in list_cols.iter().zip(&schema.lists) {
            let v = field(col, name)?;
            bits.push(match v {
                "0" => 0,
                "1" => 1,
                other => {
                    return Err(Error::Parse {
                        row,
                        column: name.clone(),
                        message: format!("expected 0 or 1, got `{other}`"),
                    })
                }
            });
        }
        let mut covariates = Vec::with_capacity(cov_cols.len());
        for (&col, name) in cov_cols.iter().zip(&schema.covariates) {
            let v = field(col, name)?;
            let x: f64 = v.parse().map_err(|_| Error::Parse {
                row,
                column: name.clone(),
                message: format!("`{v}` is not a number"),
            })?;
            if !x.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: name.clone(),
                    message: format!("`{v}` is not finite"),
                });
            }
            covariates.push(x);
        }
        let id = match id_col {
            Some(col) => field(col, &headers[col])?.to_string(),
            None => row.to_string(),
        };
        let pattern = CapturePattern::new(&bits)?;
        if !pattern.is_nonzero() {
            return Err(Error::Parse {
                row,
                column: schema.lists.join(","),
                message: "unit appears on no list".into(),
            });
        }
        units.push(ObservedUnit::new(id, covariates, pattern)?);
    }
    Dataset::new(schema.lists.clone(), schema.covariates.clone(), units)
}
