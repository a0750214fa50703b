//! Newline-delimited structured run log: one JSON record per line.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::LossBreakdown;

/// Mask statistics attached to every step that has an active mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MaskStats {
    pub tau: f64,
    pub retained: usize,
    pub total: usize,
    pub retained_fraction: f64,
}

/// One structured log line. The `record` tag names the variant.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    RunStart {
        version: String,
        benchmark_checksum: u64,
        benchmark_seed: u64,
        common_seed: u64,
        run_seed: u64,
    },
    PretrainCheck {
        step: u64,
        top1: f64,
    },
    PretrainDone {
        steps: u64,
        top1: f64,
        target_reached: bool,
    },
    TaskStart {
        stage: usize,
        round: usize,
        task: usize,
        teacher_checksum: u64,
        n_old: usize,
        n_novel: usize,
    },
    Step {
        stage: usize,
        epoch: usize,
        step: u64,
        lr: f64,
        #[serde(flatten)]
        losses: LossBreakdown,
        /// Largest probe-gradient magnitude, present on refresh steps.
        #[serde(skip_serializing_if = "Option::is_none")]
        probe_max_abs: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        mask: Option<MaskStats>,
    },
    TaskEnd {
        stage: usize,
        steps: u64,
        historical_len: usize,
    },
}

/// Log sink; a disabled log swallows records so library callers without an
/// output directory pay nothing.
pub struct RunLog {
    sink: Option<BufWriter<File>>,
}

impl RunLog {
    pub fn disabled() -> Self {
        Self { sink: None }
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        let file = File::create(path)
            .map_err(|e| Error::io_context(format!("cannot create log '{}'", path.display()), e))?;
        Ok(Self {
            sink: Some(BufWriter::new(file)),
        })
    }

    pub fn record(&mut self, rec: &LogRecord) -> Result<()> {
        if let Some(w) = &mut self.sink {
            let line = serde_json::to_string(rec)
                .map_err(|e| Error::Structural(format!("log serialization failed: {e}")))?;
            writeln!(w, "{line}").map_err(|e| Error::io_context("log write failed", e))?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.sink {
            w.flush().map_err(|e| Error::io_context("log flush failed", e))?;
        }
        Ok(())
    }
}
