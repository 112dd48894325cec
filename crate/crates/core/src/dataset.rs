//! On-disk dataset layout and synthetic dataset generation.
//!
//! ```text
//! <root>/volumes/<id>.{raw,json}            normalized scans
//! <root>/masks_lung/<id>.{raw,json}         ground-truth lung masks
//! <root>/masks_infection/<id>.{raw,json}    ground-truth infection masks
//! <root>/labels.json                        id -> severity category (1..4)
//! <root>/involvements.json                  id -> realized involvement fraction
//! <root>/splits.json                        {"train": [...], "val": [...]}
//! <root>/digest.txt                         sha256 over all of the above
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;
use crate::volumes::phantom::{generate_phantom, PhantomSpec};
use crate::volumes::{
    load_mask, load_splits, load_volume, make_splits, save_mask, save_splits, save_volume,
    CtVolume, Dims3, MaskVolume, Severity, Splits, SEVERITIES,
};

/// Per-class target involvement bands, kept clear of the 0.25/0.50/0.75
/// grade boundaries so rank-selection rounding cannot flip a label.
const CLASS_BANDS: [(f64, f64); 4] = [(0.02, 0.22), (0.28, 0.47), (0.53, 0.72), (0.78, 0.95)];

/// Default per-class scan counts for the synthetic benchmark
/// (train Mild/Moderate/Severe/Critical, then validation).
pub const DEFAULT_TRAIN_COUNTS: [usize; 4] = [85, 62, 85, 26];
pub const DEFAULT_VAL_COUNTS: [usize; 4] = [22, 10, 22, 5];

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub out_dir: PathBuf,
    pub shape: Dims3,
    pub train_counts: [usize; 4],
    pub val_counts: [usize; 4],
    pub noise: f32,
    pub blob_count: usize,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        SynthConfig {
            out_dir: out_dir.into(),
            shape: (32, 64, 64),
            train_counts: DEFAULT_TRAIN_COUNTS,
            val_counts: DEFAULT_VAL_COUNTS,
            noise: 0.05,
            blob_count: 3,
            seed: 0,
        }
    }
}

pub struct Dataset {
    pub root: PathBuf,
    pub splits: Splits,
    pub labels: BTreeMap<String, u8>,
    pub involvements: BTreeMap<String, f64>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let splits = load_splits(&root.join("splits.json"))?;
        let labels: BTreeMap<String, u8> =
            serde_json::from_str(&fs::read_to_string(root.join("labels.json")).map_err(|e| {
                Error::runtime(format!("missing labels.json in {}: {e}", root.display()))
            })?)?;
        let involvements: BTreeMap<String, f64> = match fs::read_to_string(
            root.join("involvements.json"),
        ) {
            Ok(text) => serde_json::from_str(&text)?,
            Err(_) => BTreeMap::new(),
        };
        Ok(Dataset { root: root.to_path_buf(), splits, labels, involvements })
    }

    pub fn severity(&self, id: &str) -> Result<Severity> {
        let c = self
            .labels
            .get(id)
            .ok_or_else(|| Error::validation(format!("id {id} has no label")))?;
        Severity::from_category(*c)
    }

    pub fn volume(&self, id: &str) -> Result<CtVolume> {
        load_volume(&self.root.join("volumes").join(format!("{id}.json")))
    }

    pub fn lung_mask(&self, id: &str) -> Result<MaskVolume> {
        load_mask(&self.root.join("masks_lung").join(format!("{id}.json")))
    }

    pub fn infection_mask(&self, id: &str) -> Result<MaskVolume> {
        load_mask(&self.root.join("masks_infection").join(format!("{id}.json")))
    }

    /// Mask from an arbitrary directory (e.g. predictions), same file layout.
    pub fn mask_from(&self, dir: &Path, id: &str) -> Result<MaskVolume> {
        load_mask(&dir.join(format!("{id}.json")))
    }

    pub fn ids(&self, split: &str) -> Result<&[String]> {
        match split {
            "train" => Ok(&self.splits.train),
            "val" => Ok(&self.splits.val),
            _ => Err(Error::validation(format!("unknown split `{split}` (train|val)"))),
        }
    }

    /// Per-class scan counts over the train split, for loss weighting.
    pub fn train_class_counts(&self) -> Result<[usize; 4]> {
        let mut counts = [0usize; 4];
        for id in &self.splits.train {
            counts[self.severity(id)?.class_index()] += 1;
        }
        Ok(counts)
    }
}

/// Generate a labeled phantom dataset on disk. Deterministic per seed;
/// re-running with the same config reproduces byte-identical files.
pub fn synthesize_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    let root = &cfg.out_dir;
    fs::create_dir_all(root)?;

    let mut labels: BTreeMap<String, u8> = BTreeMap::new();
    let mut involvements: BTreeMap<String, f64> = BTreeMap::new();
    let mut items: Vec<(String, Severity)> = Vec::new();

    let mut index = 0usize;
    for (c, sev) in SEVERITIES.iter().enumerate() {
        let total = cfg.train_counts[c] + cfg.val_counts[c];
        let (lo, hi) = CLASS_BANDS[c];
        for _ in 0..total {
            let id = format!("phantom_{index:04}");
            let mut frac_rng = rng::stream(cfg.seed, "synth-frac", index as u64);
            let target = if c == 0 && frac_rng.gen_bool(0.25) {
                0.0 // some Mild cases have no infection at all
            } else {
                frac_rng.gen_range(lo..hi)
            };
            let spec = PhantomSpec {
                shape: cfg.shape,
                spacing: (5.0, 1.0, 1.0),
                target_involvement: target,
                blob_count: cfg.blob_count,
                noise: cfg.noise,
                geometry_jitter: 0.10,
                seed: cfg.seed.wrapping_add(index as u64).wrapping_mul(2654435761),
                id: id.clone(),
            };
            let p = generate_phantom(&spec)?;
            debug_assert_eq!(p.severity, *sev, "band target produced wrong class");
            save_volume(&root.join("volumes"), &p.volume)?;
            save_mask(&root.join("masks_lung"), &id, &p.lung, p.volume.spacing)?;
            save_mask(&root.join("masks_infection"), &id, &p.infection, p.volume.spacing)?;
            labels.insert(id.clone(), p.severity.category());
            involvements.insert(id.clone(), p.involvement);
            items.push((id, p.severity));
            index += 1;
        }
    }

    let splits = make_splits(&items, cfg.train_counts, cfg.val_counts, cfg.seed)?;
    fs::write(root.join("labels.json"), serde_json::to_string_pretty(&labels)?)?;
    fs::write(root.join("involvements.json"), serde_json::to_string_pretty(&involvements)?)?;
    save_splits(&root.join("splits.json"), &splits)?;
    let digest = dataset_digest(root)?;
    fs::write(root.join("digest.txt"), &digest)?;

    Ok(Dataset { root: root.clone(), splits, labels, involvements })
}

/// sha256 over every dataset file (sorted relative paths), excluding the
/// digest file itself.
pub fn dataset_digest(root: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(root, root, &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    for rel in &files {
        if rel == "digest.txt" {
            continue;
        }
        hasher.update(rel.as_bytes());
        hasher.update([0u8]);
        hasher.update(fs::read(root.join(rel))?);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if let Ok(rel) = path.strip_prefix(root) {
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(dir: &Path) -> SynthConfig {
        SynthConfig {
            shape: (8, 16, 16),
            train_counts: [2, 2, 2, 2],
            val_counts: [1, 1, 1, 1],
            seed: 7,
            ..SynthConfig::new(dir)
        }
    }

    #[test]
    fn synth_writes_consistent_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synthesize_dataset(&tiny_cfg(dir.path())).unwrap();
        assert_eq!(ds.splits.train.len(), 8);
        assert_eq!(ds.splits.val.len(), 4);
        assert_eq!(ds.labels.len(), 12);
        // every id loads, masks align, label matches involvement
        for id in ds.splits.train.iter().chain(&ds.splits.val) {
            let v = ds.volume(id).unwrap();
            let lung = ds.lung_mask(id).unwrap();
            let inf = ds.infection_mask(id).unwrap();
            assert_eq!(v.shape, lung.shape);
            assert_eq!(v.shape, inf.shape);
            let f = ds.involvements[id];
            assert_eq!(
                crate::volumes::severity_from_involvement(f).unwrap().category(),
                ds.labels[id]
            );
        }
        assert_eq!(ds.train_class_counts().unwrap(), [2, 2, 2, 2]);
    }

    #[test]
    fn same_seed_same_digest() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        synthesize_dataset(&tiny_cfg(d1.path())).unwrap();
        synthesize_dataset(&tiny_cfg(d2.path())).unwrap();
        let a = dataset_digest(d1.path()).unwrap();
        let b = dataset_digest(d2.path()).unwrap();
        assert_eq!(a, b);
        let mut other = tiny_cfg(d1.path());
        other.seed = 8;
        let d3 = tempfile::tempdir().unwrap();
        other.out_dir = d3.path().to_path_buf();
        synthesize_dataset(&other).unwrap();
        assert_ne!(a, dataset_digest(d3.path()).unwrap());
    }
}
