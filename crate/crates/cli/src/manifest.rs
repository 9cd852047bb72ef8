//! Append-only record of completed stages and the hashes they consumed.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";
const LOCK_FILE: &str = ".rlhaif.lock";

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> CliResult<String> {
    Ok(hash_bytes(&fs::read(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord {
    pub stage: String,
    /// Input name (a run-relative path or `config`) to SHA-256.
    pub input_hashes: BTreeMap<String, String>,
    /// Run-relative output path to SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub wall_time_secs: f64,
    pub completed_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn load_or_new(run_dir: &Path, config_hash: &str) -> CliResult<Self> {
        let path = run_dir.join(MANIFEST_FILE);
        let mut m = if path.exists() {
            serde_json::from_slice(&fs::read(&path)?)
                .map_err(|e| CliError::Stage(format!("corrupt {}: {e}", path.display())))?
        } else {
            RunManifest { tool_version: String::new(), config_hash: String::new(), stages: Vec::new() }
        };
        m.tool_version = env!("CARGO_PKG_VERSION").to_string();
        m.config_hash = config_hash.to_string();
        Ok(m)
    }

    pub fn save(&self, run_dir: &Path) -> CliResult<()> {
        let path = run_dir.join(MANIFEST_FILE);
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(self).map_err(rlhaif_core::Error::from)?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn last(&self, stage: &str) -> Option<&StageRecord> {
        self.stages.iter().rev().find(|r| r.stage == stage)
    }

    /// True when the latest run of `stage` saw the same inputs and its
    /// outputs are still on disk unchanged.
    pub fn is_current(&self, stage: &str, inputs: &BTreeMap<String, String>, run_dir: &Path) -> bool {
        let Some(rec) = self.last(stage) else { return false };
        &rec.input_hashes == inputs
            && rec.outputs.iter().all(|(p, h)| hash_file(&run_dir.join(p)).is_ok_and(|cur| &cur == h))
    }

    pub fn push(&mut self, record: StageRecord) {
        self.stages.push(record);
    }
}

/// Exclusive advisory lock on the run directory, released on drop or exit.
pub struct RunLock {
    _file: fs::File,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(run_dir)?;
        let path = run_dir.join(LOCK_FILE);
        let mut file = fs::OpenOptions::new().create(true).truncate(false).read(true).write(true).open(&path)?;
        match file.try_lock() {
            Ok(()) => {}
            Err(fs::TryLockError::WouldBlock) => {
                let holder = fs::read_to_string(&path).unwrap_or_default();
                return Err(CliError::Locked(format!("pid {}", holder.trim())));
            }
            Err(fs::TryLockError::Error(e)) => return Err(e.into()),
        }
        file.set_len(0)?;
        write!(file, "{}", std::process::id())?;
        Ok(RunLock { _file: file })
    }
}
