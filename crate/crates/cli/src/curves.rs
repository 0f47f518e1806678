//! Stacked per-unit curves behind the usual capture-pattern plots.

use std::io::Write;

use anyhow::{bail, Result};
use smoothcr::data::nonzero_patterns;
use smoothcr::EstimateReport;

/// Writes one row per unit, sorted by covariate `by` (input order when
/// `None` or tied): cumulative local probabilities of the nonzero patterns
/// in display order, so the last of them is 1, then the top curve
/// `1 + pi0` and `pi0` itself.
pub fn emit_curves<W: Write>(report: &EstimateReport, by: Option<usize>, out: W) -> Result<()> {
    let k = report.k();
    if let Some(c) = by {
        if c >= report.config.covariates.len() {
            bail!("curve covariate index {c} out of range");
        }
    }
    let mut order: Vec<usize> = (0..report.per_unit.len()).collect();
    if let Some(c) = by {
        order.sort_by(|&a, &b| report.per_unit[a].x[c].total_cmp(&report.per_unit[b].x[c]));
    }

    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["id".to_string()];
    header.extend(report.config.covariates.iter().cloned());
    header.extend(nonzero_patterns(k).map(|p| format!("cum_{p}")));
    header.push("top".into());
    header.push("pi0".into());
    w.write_record(&header)?;

    for i in order {
        let u = &report.per_unit[i];
        let mut row = vec![u.id.clone()];
        row.extend(u.x.iter().map(|v| smoothcr::json::format_g17(*v)));
        let mut cum = 0.0;
        for p in nonzero_patterns(k) {
            cum += u.dist.get(p.cell_index()).copied().unwrap_or(0.0);
            row.push(smoothcr::json::format_g17(cum));
        }
        row.push(smoothcr::json::format_g17(1.0 + u.pi0));
        row.push(smoothcr::json::format_g17(u.pi0));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
