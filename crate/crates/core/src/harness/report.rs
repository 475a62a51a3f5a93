//! Re-emission of run artifacts.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dependency::DedSample;
use crate::error::{Error, Result};
use crate::harness::io;
use crate::harness::pipeline::RunArtifacts;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    /// The whole artifact set.
    Json,
    /// `layer,sample_id,entropy,ded` scatter rows.
    Csv,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            other => Err(Error::InvalidInput(format!(
                "unknown format `{other}` (expected json or csv)"
            ))),
        }
    }
}

pub fn render_report(artifacts: &RunArtifacts, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => io::to_json_string(artifacts),
        ReportFormat::Csv => ded_csv(
            artifacts
                .dependency
                .as_ref()
                .map_or(&[][..], |d| &d.ded_samples[..]),
        ),
    }
}

/// DED scatter rows as CSV, header included even when there are no rows.
pub fn ded_csv(rows: &[DedSample]) -> Result<String> {
    if rows.is_empty() {
        return Ok("layer,sample_id,entropy,ded\n".to_string());
    }
    io::to_csv_string(rows)
}

pub fn emit_report(artifacts: &RunArtifacts, format: ReportFormat, path: &Path) -> Result<()> {
    io::write_text(path, &render_report(artifacts, format)?)
}
