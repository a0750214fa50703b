//! Versioned, checksummed checkpoint files.
//!
//! Layout: a small JSON envelope carrying the format version, the payload
//! byte length, an FNV-1a-64 digest, and the payload itself as base64. The
//! payload is canonical JSON holding the config, every parameter tensor
//! (f64 bits, base64, little-endian), the historical concept names, the run
//! seed and the stage counter, plus the checksum of the benchmark the run
//! was bound to. Any single-byte corruption fails the digest, the length
//! check, or parsing — never a silent misparse.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::diffcore::params::ParamStore;
use crate::error::{Error, Result};
use crate::synthworld::Benchmark;
use crate::textmodel::branch::TextBranchState;
use crate::util::fnv1a64;

use super::{DataAudit, RunState};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope {
    format_version: u32,
    payload_len: usize,
    /// FNV-1a-64 of the payload bytes, zero-padded hex.
    checksum: String,
    payload_b64: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Payload {
    config: RunConfig,
    params: ParamStore,
    k_trainable: usize,
    projector_trainable: bool,
    historical: Vec<String>,
    run_seed: u64,
    stages_completed: usize,
    benchmark_checksum: u64,
}

/// A checkpoint plus the config it was produced under.
#[derive(Debug)]
pub struct LoadedRun {
    pub config: RunConfig,
    pub run: RunState,
}

pub fn save_checkpoint(run: &RunState, config: &RunConfig, path: &Path) -> Result<()> {
    let payload = Payload {
        config: config.clone(),
        params: run.student.params.clone(),
        k_trainable: run.student.k_trainable(),
        projector_trainable: run.student.projector_trainable(),
        historical: run.historical.clone(),
        run_seed: run.run_seed,
        stages_completed: run.stages_completed,
        benchmark_checksum: run.benchmark.checksum()?,
    };
    let payload_bytes = serde_json::to_vec(&payload)
        .map_err(|e| Error::Structural(format!("checkpoint serialization failed: {e}")))?;
    let envelope = Envelope {
        format_version: CHECKPOINT_FORMAT_VERSION,
        payload_len: payload_bytes.len(),
        checksum: format!("{:016x}", fnv1a64(&payload_bytes)),
        payload_b64: B64.encode(&payload_bytes),
    };
    let text = serde_json::to_string_pretty(&envelope)
        .map_err(|e| Error::Structural(format!("checkpoint serialization failed: {e}")))?;
    std::fs::write(path, text).map_err(|e| {
        Error::io_context(format!("cannot write checkpoint '{}'", path.display()), e)
    })?;
    Ok(())
}

/// Load and fully verify a checkpoint against the benchmark it will run
/// with. The restored student is bit-identical to the saved one.
pub fn load_checkpoint(path: &Path, benchmark: Benchmark) -> Result<LoadedRun> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::io_context(format!("cannot read checkpoint '{}'", path.display()), e)
    })?;
    let envelope: Envelope = serde_json::from_str(&text)
        .map_err(|e| Error::Integrity(format!("malformed checkpoint envelope: {e}")))?;
    if envelope.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Integrity(format!(
            "unsupported checkpoint format version {} (expected {CHECKPOINT_FORMAT_VERSION})",
            envelope.format_version
        )));
    }
    let payload_bytes = B64
        .decode(&envelope.payload_b64)
        .map_err(|e| Error::Integrity(format!("checkpoint payload is not valid base64: {e}")))?;
    if payload_bytes.len() != envelope.payload_len {
        return Err(Error::Integrity(format!(
            "checkpoint payload is {} bytes, envelope says {}",
            payload_bytes.len(),
            envelope.payload_len
        )));
    }
    let digest = format!("{:016x}", fnv1a64(&payload_bytes));
    if digest != envelope.checksum {
        return Err(Error::Integrity(format!(
            "checkpoint checksum mismatch: payload hashes to {digest}, envelope says {}",
            envelope.checksum
        )));
    }
    let payload: Payload = serde_json::from_slice(&payload_bytes)
        .map_err(|e| Error::Integrity(format!("malformed checkpoint payload: {e}")))?;
    payload.config.validate()?;

    let bench_checksum = benchmark.checksum()?;
    if bench_checksum != payload.benchmark_checksum {
        return Err(Error::Integrity(format!(
            "checkpoint was produced against benchmark {:016x}, given {bench_checksum:016x}",
            payload.benchmark_checksum
        )));
    }

    let mut params = payload.params;
    params.rebuild_index();
    let student = TextBranchState::from_params(
        payload.config.model.dims(),
        params,
        payload.k_trainable,
        payload.projector_trainable,
    )?;
    student.params.check_finite("checkpoint parameters")?;

    let run = RunState {
        student,
        benchmark,
        historical: payload.historical,
        stages_completed: payload.stages_completed,
        run_seed: payload.run_seed,
        audit: DataAudit::default(),
    };
    run.benchmark.validate()?;
    Ok(LoadedRun {
        config: payload.config,
        run,
    })
}
