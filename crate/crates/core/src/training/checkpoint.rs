//! Checkpoints: a JSON meta file (architecture config, epoch, metric,
//! section layout) plus a binary little-endian f32 blob holding parameters
//! and optimizer state. Writes are atomic (temp file, then rename).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierConfig;
use crate::error::{Error, Result};
use crate::segmentation::SegConfig;
use crate::training::TrainMode;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BlobSection {
    name: String,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    epoch: usize,
    best_metric: f64,
    seed: u64,
    sections: Vec<BlobSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seg_config: Option<SegConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    clf_config: Option<ClassifierConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mode: Option<TrainMode>,
}

#[derive(Debug, Clone)]
pub struct SegCheckpoint {
    pub config: SegConfig,
    pub params: Vec<f32>,
    pub opt_state: Vec<f32>,
    pub epoch: usize,
    pub best_metric: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct ClfCheckpoint {
    pub config: ClassifierConfig,
    pub mode: TrainMode,
    pub params: Vec<f32>,
    pub opt_state: Vec<f32>,
    /// [log_sigma1, log_sigma2]
    pub sigmas: Vec<f32>,
    pub sigma_opt_state: Vec<f32>,
    pub epoch: usize,
    pub best_metric: f64,
    pub seed: u64,
}

fn write_blob(path: &Path, sections: &[(&str, &[f32])]) -> Result<Vec<BlobSection>> {
    let mut bytes = Vec::new();
    let mut layout = Vec::new();
    for (name, data) in sections {
        for v in *data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        layout.push(BlobSection { name: name.to_string(), len: data.len() });
    }
    let tmp = path.with_extension("bin.tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path.with_extension("bin"))?;
    Ok(layout)
}

fn write_meta(path: &Path, meta: &CheckpointMeta) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_string_pretty(meta)?)?;
    fs::rename(&tmp, path.with_extension("json"))?;
    Ok(())
}

fn read_blob(path: &Path, sections: &[BlobSection]) -> Result<Vec<Vec<f32>>> {
    let bytes = fs::read(path.with_extension("bin")).map_err(|e| {
        Error::runtime(format!("missing checkpoint blob {}: {e}", path.display()))
    })?;
    let total: usize = sections.iter().map(|s| s.len).sum();
    if bytes.len() != total * 4 {
        return Err(Error::runtime(format!(
            "checkpoint blob {} has {} bytes, layout needs {}",
            path.display(),
            bytes.len(),
            total * 4
        )));
    }
    let mut out = Vec::with_capacity(sections.len());
    let mut off = 0usize;
    for s in sections {
        let chunk: Vec<f32> = bytes[off * 4..(off + s.len) * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        off += s.len;
        out.push(chunk);
    }
    Ok(out)
}

fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let text = fs::read_to_string(path.with_extension("json")).map_err(|e| {
        Error::runtime(format!("missing checkpoint meta {}: {e}", path.display()))
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// `path` is the checkpoint stem; `.json` and `.bin` are added.
pub fn save_seg_checkpoint(path: &Path, ckpt: &SegCheckpoint) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let sections =
        write_blob(path, &[("params", &ckpt.params), ("opt_state", &ckpt.opt_state)])?;
    write_meta(
        path,
        &CheckpointMeta {
            kind: "seg".into(),
            epoch: ckpt.epoch,
            best_metric: ckpt.best_metric,
            seed: ckpt.seed,
            sections,
            seg_config: Some(ckpt.config.clone()),
            clf_config: None,
            mode: None,
        },
    )
}

pub fn load_seg_checkpoint(path: &Path) -> Result<SegCheckpoint> {
    let meta = read_meta(path)?;
    if meta.kind != "seg" {
        return Err(Error::validation(format!(
            "checkpoint {} is kind `{}`, expected `seg`",
            path.display(),
            meta.kind
        )));
    }
    let config = meta
        .seg_config
        .ok_or_else(|| Error::runtime("seg checkpoint missing architecture config"))?;
    let mut blobs = read_blob(path, &meta.sections)?;
    let opt_state = blobs.pop().unwrap_or_default();
    let params = blobs.pop().ok_or_else(|| Error::runtime("checkpoint blob empty"))?;
    Ok(SegCheckpoint {
        config,
        params,
        opt_state,
        epoch: meta.epoch,
        best_metric: meta.best_metric,
        seed: meta.seed,
    })
}

pub fn save_clf_checkpoint(path: &Path, ckpt: &ClfCheckpoint) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let sections = write_blob(
        path,
        &[
            ("params", &ckpt.params),
            ("opt_state", &ckpt.opt_state),
            ("sigmas", &ckpt.sigmas),
            ("sigma_opt_state", &ckpt.sigma_opt_state),
        ],
    )?;
    write_meta(
        path,
        &CheckpointMeta {
            kind: "clf".into(),
            epoch: ckpt.epoch,
            best_metric: ckpt.best_metric,
            seed: ckpt.seed,
            sections,
            seg_config: None,
            clf_config: Some(ckpt.config.clone()),
            mode: Some(ckpt.mode),
        },
    )
}

pub fn load_clf_checkpoint(path: &Path) -> Result<ClfCheckpoint> {
    let meta = read_meta(path)?;
    if meta.kind != "clf" {
        return Err(Error::validation(format!(
            "checkpoint {} is kind `{}`, expected `clf`",
            path.display(),
            meta.kind
        )));
    }
    let config = meta
        .clf_config
        .ok_or_else(|| Error::runtime("clf checkpoint missing architecture config"))?;
    let mode = meta
        .mode
        .ok_or_else(|| Error::runtime("clf checkpoint missing mode"))?;
    let blobs = read_blob(path, &meta.sections)?;
    if blobs.len() != 4 {
        return Err(Error::runtime(format!(
            "clf checkpoint has {} sections, expected 4",
            blobs.len()
        )));
    }
    let mut it = blobs.into_iter();
    Ok(ClfCheckpoint {
        config,
        mode,
        params: it.next().unwrap(),
        opt_state: it.next().unwrap(),
        sigmas: it.next().unwrap(),
        sigma_opt_state: it.next().unwrap(),
        epoch: meta.epoch,
        best_metric: meta.best_metric,
        seed: meta.seed,
    })
}

/// Stem path `<dir>/<name>` for a checkpoint pair of files.
pub fn checkpoint_stem(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}
