//! Metrics persistence: one CSV row per training iteration, JSON evaluation
//! reports and plot-ready columnar files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::loss::BundleValues;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub values: BundleValues,
    pub wall_time_s: f64,
}

pub const METRICS_HEADER: &str =
    "iteration,l_joint,l_pre,r_pre,j_pre,l_meta,r_meta,j_meta,o_total,wall_time_s";

fn format_row(row: &MetricsRow) -> String {
    let v = &row.values;
    format!(
        "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.3}",
        row.iteration,
        v.l_joint,
        v.l_pre,
        v.r_pre,
        v.j_pre,
        v.l_meta,
        v.r_meta,
        v.j_meta,
        v.o_total,
        row.wall_time_s
    )
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{METRICS_HEADER}")?;
    for row in rows {
        writeln!(w, "{}", format_row(row))?;
    }
    w.flush()?;
    Ok(())
}

/// Strip the wall-time column; everything that remains is reproducible
/// bit-for-bit from (seed, config).
pub fn strip_wall_time(csv_text: &str) -> String {
    csv_text
        .lines()
        .map(|line| match line.rfind(',') {
            Some(pos) => &line[..pos],
            None => line,
        })
        .collect::<Vec<_>>()
        .join("\n")
}
