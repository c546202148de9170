//! Stage checkpoints.
//!
//! Each completed stage writes its artifact (`<stage>.json`) and a small
//! record (`<stage>.ckpt.json`) holding the artifact digest, the digest of
//! the config keys the stage depends on, and the cumulative ledger at that
//! point. A checkpoint is only reused when both digests still match.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use webr_core::cost::CostLedger;

use crate::config::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Sampled,
    Personas,
    Instructions,
    Deduped,
    Responses,
    Final,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Sampled,
        Stage::Personas,
        Stage::Instructions,
        Stage::Deduped,
        Stage::Responses,
        Stage::Final,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Sampled => "sampled",
            Stage::Personas => "personas",
            Stage::Instructions => "instructions",
            Stage::Deduped => "deduped",
            Stage::Responses => "responses",
            Stage::Final => "final",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub stage: Stage,
    pub artifact: PathBuf,
    pub content_digest: String,
    pub config_digest: String,
    pub ledger: CostLedger,
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("checkpoint encoding: {0}")]
    Json(#[from] serde_json::Error),
}

pub struct CheckpointStore {
    dir: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes via a temporary file and rename so a crash never leaves a
/// half-written artifact behind a valid-looking name.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(())
}

impl CheckpointStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn artifact_path(&self, stage: Stage) -> PathBuf {
        self.dir.join(format!("{stage}.json"))
    }

    fn record_path(&self, stage: Stage) -> PathBuf {
        self.dir.join(format!("{stage}.ckpt.json"))
    }

    pub fn save<T: Serialize>(
        &self,
        stage: Stage,
        payload: &T,
        config_digest: &str,
        ledger: &CostLedger,
    ) -> Result<Checkpoint, CheckpointError> {
        let bytes = serde_json::to_vec(payload)?;
        let artifact = self.artifact_path(stage);
        write_atomic(&artifact, &bytes)?;
        self.commit(stage, &artifact, &bytes, config_digest, ledger)
    }

    /// Records a checkpoint for an artifact written elsewhere.
    pub fn commit(
        &self,
        stage: Stage,
        artifact: &Path,
        bytes: &[u8],
        config_digest: &str,
        ledger: &CostLedger,
    ) -> Result<Checkpoint, CheckpointError> {
        let ckpt = Checkpoint {
            stage,
            artifact: artifact.to_path_buf(),
            content_digest: sha256_hex(bytes),
            config_digest: config_digest.to_string(),
            ledger: ledger.clone(),
        };
        write_atomic(&self.record_path(stage), &serde_json::to_vec_pretty(&ckpt)?)?;
        Ok(ckpt)
    }

    /// The checkpoint for `stage` if it exists and matches both digests.
    pub fn valid(&self, stage: Stage, config_digest: &str) -> Option<(Checkpoint, Vec<u8>)> {
        let raw = fs::read(self.record_path(stage)).ok()?;
        let ckpt: Checkpoint = serde_json::from_slice(&raw).ok()?;
        if ckpt.stage != stage || ckpt.config_digest != config_digest {
            log::info!("checkpoint {stage}: config changed");
            return None;
        }
        let bytes = fs::read(&ckpt.artifact).ok()?;
        if sha256_hex(&bytes) != ckpt.content_digest {
            log::warn!("checkpoint {stage}: artifact digest mismatch");
            return None;
        }
        Some((ckpt, bytes))
    }

    pub fn load<T: DeserializeOwned>(&self, stage: Stage, config_digest: &str) -> Option<(T, CostLedger)> {
        let (ckpt, bytes) = self.valid(stage, config_digest)?;
        let payload = serde_json::from_slice(&bytes).ok()?;
        Some((payload, ckpt.ledger))
    }

    pub fn clear(&self) -> Result<(), CheckpointError> {
        for stage in Stage::ALL {
            let p = self.record_path(stage);
            if p.exists() {
                fs::remove_file(&p).map_err(io_err(&p))?;
            }
        }
        Ok(())
    }
}
