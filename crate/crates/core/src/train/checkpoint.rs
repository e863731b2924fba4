//! Checkpoint files and the checkpoint-directory layout.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::neuralnet::Adam;

use super::model::HeadFieldModel;
use super::{EpochLog, TrainConfig};

const MAGIC: &[u8; 4] = b"HFCK";
const VERSION: u32 = 1;

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LOCK_FILE: &str = "LOCK";
pub const NAN_DUMP_FILE: &str = "nan_dump.json";

pub fn checkpoint_file(stage: u8) -> String {
    format!("stage{stage}.hfck")
}

/// Model, optimizer state and progress after a number of completed epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub stage: u8,
    pub epochs_done: usize,
    pub config: TrainConfig,
    pub model: HeadFieldModel,
    pub optimizer: Vec<Adam>,
    pub log: Vec<EpochLog>,
}

impl Checkpoint {
    /// `HFCK`, version, payload length, JSON payload, SHA-256 of the payload.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload = serde_json::to_vec(self).map_err(|e| Error::format("<checkpoint>", e.to_string()))?;
        let mut out = Vec::with_capacity(payload.len() + 48);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&Sha256::digest(&payload));
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |r: &str| Error::format(path, r.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        if bytes.len() != 16 + len + 32 {
            return Err(bad("truncated checkpoint"));
        }
        let payload = &bytes[16..16 + len];
        if Sha256::digest(payload).as_slice() != &bytes[16 + len..] {
            return Err(bad("checkpoint checksum mismatch"));
        }
        let mut ck: Checkpoint = serde_json::from_slice(payload).map_err(|e| bad(&e.to_string()))?;
        ck.model.rebuild()?;
        Ok(ck)
    }

    /// Writes through a temporary file and renames into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("hfck.tmp");
        fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Exclusive ownership of a checkpoint directory; released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::contract(format!(
                "checkpoint directory {} is locked by another trainer",
                dir.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn append_metrics(dir: &Path, log: &EpochLog) -> Result<()> {
    let path = dir.join(METRICS_FILE);
    let mut f: File = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    let line = serde_json::to_string(log).map_err(|e| Error::format(&path, e.to_string()))?;
    writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
}
