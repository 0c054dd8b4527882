//! Metrics and summary artifacts. Float cells use Rust's shortest
//! round-trip formatting, so identical values always produce identical
//! bytes; full determinism of a run therefore shows up as a byte-identical
//! CSV.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::priors::DistillStepRecord;
use crate::Result;

pub const METRICS_HEADER: &str = "step,distill_grad_norm,alignment_loss,t,forwards,backwards";

/// Distill metrics file; the `alignment_loss` cell is empty for variants
/// without a Step B.
pub fn write_metrics_csv(path: &Path, records: &[DistillStepRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{METRICS_HEADER}")?;
    for r in records {
        let align = r
            .alignment_loss
            .map(|v| v.to_string())
            .unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step, r.distill_grad_norm, align, r.t, r.forwards, r.backwards
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Denoiser training curve (its own schema; the distill metrics schema is
/// fixed and does not fit training).
pub fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "step,loss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(out, "{i},{l}")?;
    }
    out.flush()?;
    Ok(())
}

/// Generic rows-of-cells CSV for recipe reports and exports.
pub fn write_table_csv(path: &Path, header: &str, rows: &[Vec<String>]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{header}")?;
    for row in rows {
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

/// One analytic-vs-MC comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleReport {
    pub quantity: String,
    pub analytic: f64,
    pub mc_estimate: f64,
    pub stderr: f64,
    pub verdict: String,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.verdict == "pass"
    }
}

pub fn verdict(ok: bool) -> String {
    if ok { "pass" } else { "fail" }.into()
}
