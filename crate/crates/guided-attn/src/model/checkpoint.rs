//! Checkpoints: a TOML manifest (config, stage, epoch, validation loss,
//! parameter count) next to a flat little-endian f32 blob in declaration
//! order. Loading verifies the parameter count against both the manifest
//! and the stage layout.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::params::{ParamStore, Stage};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub stage: Stage,
    pub epoch: usize,
    pub val_loss: f64,
    pub param_count: usize,
    pub config: ModelConfig,
}

fn manifest_path(stem: &Path) -> PathBuf {
    stem.with_extension("toml")
}

fn blob_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

pub fn save_checkpoint(
    stem: &Path,
    store: &ParamStore,
    cfg: &ModelConfig,
    epoch: usize,
    val_loss: f64,
) -> Result<()> {
    let manifest = CheckpointManifest {
        format_version: 1,
        stage: store.stage(),
        epoch,
        val_loss,
        param_count: store.total_len(),
        config: cfg.clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(manifest_path(stem), text)?;
    let flat = store.to_flat();
    let mut buf = Vec::with_capacity(flat.len() * 4);
    for v in flat {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(blob_path(stem), buf)?;
    Ok(())
}

pub fn load_checkpoint(stem: &Path) -> Result<(CheckpointManifest, ParamStore)> {
    let text = fs::read_to_string(manifest_path(stem))
        .map_err(|e| Error::Data(format!("{}: {}", manifest_path(stem).display(), e)))?;
    let manifest: CheckpointManifest =
        toml::from_str(&text).map_err(|e| Error::Data(format!("checkpoint manifest: {}", e)))?;
    let mut buf = Vec::new();
    fs::File::open(blob_path(stem))
        .map_err(|e| Error::Data(format!("{}: {}", blob_path(stem).display(), e)))?
        .read_to_end(&mut buf)?;
    if buf.len() != manifest.param_count * 4 {
        return Err(Error::Data(format!(
            "parameter-count mismatch: manifest declares {} values ({} bytes), blob has {} bytes",
            manifest.param_count,
            manifest.param_count * 4,
            buf.len()
        )));
    }
    let flat: Vec<f64> = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let store = ParamStore::from_flat(&manifest.config, manifest.stage, &flat)?;
    Ok((manifest, store))
}
