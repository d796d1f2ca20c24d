//! Run artifacts: the JSON-lines step log and the run manifest.
//!
//! `runlog.jsonl` starts with a header object carrying the run id, then
//! one object per step with exactly the fields step, l_true, l_reg,
//! l_combined, active, cap. Every artifact of a run embeds the same run
//! id, which `manifest.json` maps back to the full config snapshot.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::{RunLog, StepRecord, TrainConfig};

/// Stable identifier of (config, seed): FNV-1a over the serialized config.
pub fn run_id(cfg: &TrainConfig) -> u64 {
    let text = crate::config::serialize(cfg);
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in text.bytes() {
        h ^= byte as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^= cfg.seed;
    h
}

pub fn run_id_hex(cfg: &TrainConfig) -> String {
    format!("{:016x}", run_id(cfg))
}

#[derive(Serialize, Deserialize)]
struct Header {
    run_id: String,
}

/// Serializes the step records as JSON lines, header first.
pub fn to_jsonl(log: &RunLog, run_id: &str) -> String {
    let mut out = String::new();
    out.push_str(&serde_json::to_string(&Header { run_id: run_id.into() }).expect("header"));
    out.push('\n');
    for record in &log.records {
        out.push_str(&serde_json::to_string(record).expect("step record"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl(log: &RunLog, run_id: &str, path: &Path) -> Result<()> {
    std::fs::write(path, to_jsonl(log, run_id))?;
    Ok(())
}

/// Reads step records back; used by tests and the report command.
pub fn read_jsonl(path: &Path) -> Result<(String, Vec<StepRecord>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Header = match lines.next() {
        Some(first) => serde_json::from_str(first)
            .map_err(|e| Error::Corrupt(format!("bad runlog header: {e}")))?,
        None => return Err(Error::Corrupt("empty runlog".into())),
    };
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: StepRecord = serde_json::from_str(line)
            .map_err(|e| Error::Corrupt(format!("bad runlog line {}: {e}", i + 2)))?;
        records.push(record);
    }
    Ok((header.run_id, records))
}

/// Everything needed to reproduce and locate a run's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub seed: u64,
    pub version: String,
    /// Full config snapshot in the config-file syntax.
    pub config: String,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(cfg: &TrainConfig, outputs: Vec<String>) -> Self {
        RunManifest {
            run_id: run_id_hex(cfg),
            seed: cfg.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: crate::config::serialize(cfg),
            outputs,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest");
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Corrupt(format!("bad manifest: {e}")))
    }
}
