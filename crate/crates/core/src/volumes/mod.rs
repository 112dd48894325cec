//! Volume containers, file I/O, resampling, intensity normalization,
//! severity mapping and dataset splits.
//!
//! On-disk format: `<id>.raw` (little-endian float32 for volumes, u8 for
//! masks, C order slowest-to-fastest T,H,W) plus an `<id>.json` sidecar
//! carrying shape, spacing, dtype and id. Chosen for bit-exact portability.

pub mod phantom;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// (T, H, W) in voxels; also used for generic (D, H, W) spatial dims.
pub type Dims3 = (usize, usize, usize);

pub fn voxel_count(d: Dims3) -> usize {
    d.0 * d.1 * d.2
}

/// A 3D scalar field with voxel spacing metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct CtVolume {
    pub data: Vec<f32>,
    pub shape: Dims3,
    /// (dz, dy, dx) in millimetres.
    pub spacing: (f32, f32, f32),
    pub normalized: bool,
    pub id: String,
}

impl CtVolume {
    pub fn new(
        data: Vec<f32>,
        shape: Dims3,
        spacing: (f32, f32, f32),
        normalized: bool,
        id: impl Into<String>,
    ) -> Result<Self> {
        if shape.0 == 0 || shape.1 == 0 || shape.2 == 0 {
            return Err(Error::validation(format!("volume shape has zero dim: {shape:?}")));
        }
        if data.len() != voxel_count(shape) {
            return Err(Error::validation(format!(
                "payload size mismatch: shape {:?} needs {} voxels, got {}",
                shape,
                voxel_count(shape),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!("non-finite voxel at index {i}")));
        }
        if normalized {
            if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::validation(format!(
                    "normalized volume has voxel outside [0,1] at index {i}"
                )));
            }
        }
        Ok(CtVolume { data, shape, spacing, normalized, id: id.into() })
    }

    pub fn slice(&self, t: usize) -> &[f32] {
        let n = self.shape.1 * self.shape.2;
        &self.data[t * n..(t + 1) * n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Lung,
    Infection,
}

/// A binary field aligned with a [`CtVolume`].
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVolume {
    pub data: Vec<u8>,
    pub shape: Dims3,
    pub kind: MaskKind,
}

impl MaskVolume {
    pub fn new(data: Vec<u8>, shape: Dims3, kind: MaskKind) -> Result<Self> {
        if data.len() != voxel_count(shape) {
            return Err(Error::validation(format!(
                "payload size mismatch: shape {:?} needs {} voxels, got {}",
                shape,
                voxel_count(shape),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| *v > 1) {
            return Err(Error::validation(format!("mask voxel not in {{0,1}} at index {i}")));
        }
        Ok(MaskVolume { data, shape, kind })
    }

    pub fn slice(&self, t: usize) -> &[u8] {
        let n = self.shape.1 * self.shape.2;
        &self.data[t * n..(t + 1) * n]
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|v| **v == 1).count()
    }
}

/// Four-grade severity label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Severity {
    Mild,
    Moderate,
    Severe,
    Critical,
}

pub const SEVERITIES: [Severity; 4] = [
    Severity::Mild,
    Severity::Moderate,
    Severity::Severe,
    Severity::Critical,
];

impl Severity {
    /// Category index in 1..=4.
    pub fn category(self) -> u8 {
        match self {
            Severity::Mild => 1,
            Severity::Moderate => 2,
            Severity::Severe => 3,
            Severity::Critical => 4,
        }
    }

    /// Zero-based class index in 0..=3.
    pub fn class_index(self) -> usize {
        self.category() as usize - 1
    }

    pub fn from_category(c: u8) -> Result<Self> {
        match c {
            1 => Ok(Severity::Mild),
            2 => Ok(Severity::Moderate),
            3 => Ok(Severity::Severe),
            4 => Ok(Severity::Critical),
            _ => Err(Error::validation(format!("severity category {c} not in 1..=4"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Severity::Mild => "Mild",
            Severity::Moderate => "Moderate",
            Severity::Severe => "Severe",
            Severity::Critical => "Critical",
        }
    }
}

/// Maps an involvement fraction (infected lung volume / lung volume) to a
/// severity grade. Boundary fractions 0.25 / 0.50 / 0.75 are assigned to
/// the lower grade.
pub fn severity_from_involvement(f: f64) -> Result<Severity> {
    if !f.is_finite() || !(0.0..=1.0).contains(&f) {
        return Err(Error::validation(format!("involvement fraction {f} outside [0,1]")));
    }
    Ok(if f <= 0.25 {
        Severity::Mild
    } else if f <= 0.50 {
        Severity::Moderate
    } else if f <= 0.75 {
        Severity::Severe
    } else {
        Severity::Critical
    })
}

/// Clamp-rescale intensities to [0,1] over the window [lo, hi].
pub fn normalize_intensity(v: &CtVolume, lo: f32, hi: f32) -> Result<CtVolume> {
    if !(lo < hi) {
        return Err(Error::validation(format!("window lo {lo} must be < hi {hi}")));
    }
    let span = hi - lo;
    let data = v.data.iter().map(|x| ((x - lo) / span).clamp(0.0, 1.0)).collect();
    CtVolume::new(data, v.shape, v.spacing, true, v.id.clone())
}

/// Default normalization window, a lung-window analog.
pub const DEFAULT_WINDOW: (f32, f32) = (-1000.0, 400.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleMode {
    Trilinear,
    Nearest,
}

/// Source coordinate for output index `i` when resizing `src` -> `dst`
/// samples along one axis (corner-aligned; identity when sizes match).
fn src_coord(i: usize, src: usize, dst: usize) -> f64 {
    if dst == 1 {
        (src as f64 - 1.0) / 2.0
    } else {
        i as f64 * (src as f64 - 1.0) / (dst as f64 - 1.0)
    }
}

/// Trilinear resize of a raw (D,H,W) field. Shared by volume resampling and
/// CAM upsampling.
pub fn resample_trilinear(data: &[f32], from: Dims3, to: Dims3) -> Vec<f32> {
    let (sd, sh, sw) = from;
    let mut out = Vec::with_capacity(voxel_count(to));
    for od in 0..to.0 {
        let fz = src_coord(od, sd, to.0);
        let z0 = fz.floor() as usize;
        let z1 = (z0 + 1).min(sd - 1);
        let wz = fz - z0 as f64;
        for oh in 0..to.1 {
            let fy = src_coord(oh, sh, to.1);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(sh - 1);
            let wy = fy - y0 as f64;
            for ow in 0..to.2 {
                let fx = src_coord(ow, sw, to.2);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(sw - 1);
                let wx = fx - x0 as f64;
                let at = |z: usize, y: usize, x: usize| data[(z * sh + y) * sw + x] as f64;
                let c00 = at(z0, y0, x0) * (1.0 - wx) + at(z0, y0, x1) * wx;
                let c01 = at(z0, y1, x0) * (1.0 - wx) + at(z0, y1, x1) * wx;
                let c10 = at(z1, y0, x0) * (1.0 - wx) + at(z1, y0, x1) * wx;
                let c11 = at(z1, y1, x0) * (1.0 - wx) + at(z1, y1, x1) * wx;
                let c0 = c00 * (1.0 - wy) + c01 * wy;
                let c1 = c10 * (1.0 - wy) + c11 * wy;
                out.push((c0 * (1.0 - wz) + c1 * wz) as f32);
            }
        }
    }
    out
}

fn nearest_index(i: usize, src: usize, dst: usize) -> usize {
    ((src_coord(i, src, dst) + 0.5).floor() as usize).min(src - 1)
}

/// Nearest-neighbor resize of a raw (D,H,W) field.
pub fn resample_nearest<T: Copy>(data: &[T], from: Dims3, to: Dims3) -> Vec<T> {
    let (sd, sh, sw) = from;
    let mut out = Vec::with_capacity(voxel_count(to));
    for od in 0..to.0 {
        let z = nearest_index(od, sd, to.0);
        for oh in 0..to.1 {
            let y = nearest_index(oh, sh, to.1);
            for ow in 0..to.2 {
                let x = nearest_index(ow, sw, to.2);
                out.push(data[(z * sh + y) * sw + x]);
            }
        }
    }
    out
}

/// Resize a volume to `target`. Trilinear for intensities, nearest for
/// label-like content; trilinear output never leaves the input value range.
pub fn resample_volume(v: &CtVolume, target: Dims3, mode: ResampleMode) -> Result<CtVolume> {
    if target.0 == 0 || target.1 == 0 || target.2 == 0 {
        return Err(Error::validation(format!("resample target has zero dim: {target:?}")));
    }
    let data = match mode {
        ResampleMode::Trilinear => resample_trilinear(&v.data, v.shape, target),
        ResampleMode::Nearest => resample_nearest(&v.data, v.shape, target),
    };
    let spacing = (
        v.spacing.0 * v.shape.0 as f32 / target.0 as f32,
        v.spacing.1 * v.shape.1 as f32 / target.1 as f32,
        v.spacing.2 * v.shape.2 as f32 / target.2 as f32,
    );
    CtVolume::new(data, target, spacing, v.normalized, v.id.clone())
}

/// Nearest-neighbor mask resize; output stays binary.
pub fn resample_mask(m: &MaskVolume, target: Dims3) -> Result<MaskVolume> {
    if target.0 == 0 || target.1 == 0 || target.2 == 0 {
        return Err(Error::validation(format!("resample target has zero dim: {target:?}")));
    }
    MaskVolume::new(resample_nearest(&m.data, m.shape, target), target, m.kind)
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    shape: [usize; 3],
    spacing: [f32; 3],
    dtype: String,
    id: String,
    #[serde(default)]
    normalized: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kind: Option<MaskKind>,
}

fn sidecar_paths(path: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let stem = path.with_extension("");
    (stem.with_extension("raw"), stem.with_extension("json"))
}

fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let (_, json_path) = sidecar_paths(path);
    let text = fs::read_to_string(&json_path)
        .map_err(|e| Error::runtime(format!("missing sidecar {}: {e}", json_path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::runtime(format!("bad sidecar {}: {e}", json_path.display())))
}

/// Load a `<id>.raw` + `<id>.json` pair as a volume. `path` may point at
/// either file of the pair.
pub fn load_volume(path: &Path) -> Result<CtVolume> {
    let (raw_path, _) = sidecar_paths(path);
    let sc = read_sidecar(path)?;
    if sc.dtype != "f32" {
        return Err(Error::validation(format!("expected dtype f32, sidecar says {}", sc.dtype)));
    }
    let bytes = fs::read(&raw_path)
        .map_err(|e| Error::runtime(format!("missing file {}: {e}", raw_path.display())))?;
    let shape = (sc.shape[0], sc.shape[1], sc.shape[2]);
    if bytes.len() != voxel_count(shape) * 4 {
        return Err(Error::validation(format!(
            "payload size mismatch: sidecar shape {:?} needs {} bytes, file has {}",
            shape,
            voxel_count(shape) * 4,
            bytes.len()
        )));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let id = raw_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| sc.id.clone());
    CtVolume::new(
        data,
        shape,
        (sc.spacing[0], sc.spacing[1], sc.spacing[2]),
        sc.normalized,
        id,
    )
}

pub fn save_volume(dir: &Path, v: &CtVolume) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut bytes = Vec::with_capacity(v.data.len() * 4);
    for x in &v.data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(dir.join(format!("{}.raw", v.id)), bytes)?;
    let sc = Sidecar {
        shape: [v.shape.0, v.shape.1, v.shape.2],
        spacing: [v.spacing.0, v.spacing.1, v.spacing.2],
        dtype: "f32".into(),
        id: v.id.clone(),
        normalized: v.normalized,
        kind: None,
    };
    fs::write(dir.join(format!("{}.json", v.id)), serde_json::to_string_pretty(&sc)?)?;
    Ok(())
}

pub fn load_mask(path: &Path) -> Result<MaskVolume> {
    let (raw_path, _) = sidecar_paths(path);
    let sc = read_sidecar(path)?;
    if sc.dtype != "u8" {
        return Err(Error::validation(format!("expected dtype u8, sidecar says {}", sc.dtype)));
    }
    let data = fs::read(&raw_path)
        .map_err(|e| Error::runtime(format!("missing file {}: {e}", raw_path.display())))?;
    let shape = (sc.shape[0], sc.shape[1], sc.shape[2]);
    if data.len() != voxel_count(shape) {
        return Err(Error::validation(format!(
            "payload size mismatch: sidecar shape {:?} needs {} bytes, file has {}",
            shape,
            voxel_count(shape),
            data.len()
        )));
    }
    MaskVolume::new(data, shape, sc.kind.unwrap_or(MaskKind::Infection))
}

pub fn save_mask(dir: &Path, id: &str, m: &MaskVolume, spacing: (f32, f32, f32)) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{id}.raw")), &m.data)?;
    let sc = Sidecar {
        shape: [m.shape.0, m.shape.1, m.shape.2],
        spacing: [spacing.0, spacing.1, spacing.2],
        dtype: "u8".into(),
        id: id.to_string(),
        normalized: false,
        kind: Some(m.kind),
    };
    fs::write(dir.join(format!("{id}.json")), serde_json::to_string_pretty(&sc)?)?;
    Ok(())
}

/// Disjoint train/val id sets with exact per-class counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Partition labeled ids into train/val honoring per-class counts exactly.
/// Deterministic given `seed`.
pub fn make_splits(
    items: &[(String, Severity)],
    train_counts: [usize; 4],
    val_counts: [usize; 4],
    seed: u64,
) -> Result<Splits> {
    let mut by_class: [Vec<&str>; 4] = Default::default();
    for (id, sev) in items {
        by_class[sev.class_index()].push(id);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for c in 0..4 {
        let need = train_counts[c] + val_counts[c];
        if by_class[c].len() < need {
            return Err(Error::validation(format!(
                "class {} has {} items, {} requested",
                c + 1,
                by_class[c].len(),
                need
            )));
        }
        let mut rng = rng::stream(seed, "splits", c as u64);
        let mut ids = by_class[c].clone();
        ids.sort_unstable(); // order independent of caller's ordering
        ids.shuffle(&mut rng);
        train.extend(ids[..train_counts[c]].iter().map(|s| s.to_string()));
        val.extend(ids[train_counts[c]..need].iter().map(|s| s.to_string()));
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok(Splits { train, val })
}

pub fn save_splits(path: &Path, s: &Splits) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(s)?)?;
    Ok(())
}

pub fn load_splits(path: &Path) -> Result<Splits> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::runtime(format!("missing splits {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}
