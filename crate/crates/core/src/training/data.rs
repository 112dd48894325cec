//! In-memory training datasets built from the on-disk layout.

use std::path::Path;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::segmentation::apply_lung_mask;
use crate::training::{MaskSource, TrainMode};
use crate::volumes::{resample_mask, resample_volume, Dims3, ResampleMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegStage {
    Lung,
    Infection,
}

impl std::str::FromStr for SegStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lung" => Ok(SegStage::Lung),
            "infection" => Ok(SegStage::Infection),
            _ => Err(Error::validation(format!("unknown stage `{s}` (lung|infection)"))),
        }
    }
}

/// Slice-level segmentation samples.
pub struct SegDataset {
    pub images: Vec<Vec<f32>>,
    pub targets: Vec<Vec<u8>>,
    pub h: usize,
    pub w: usize,
}

impl SegDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Extract evenly spaced slices from every volume of a split. For the
    /// infection stage the input slice is pre-masked by the ground-truth
    /// lung, matching how the cascade feeds the second model.
    pub fn from_dataset(
        ds: &Dataset,
        split: &str,
        stage: SegStage,
        slices_per_volume: usize,
        resize_hw: Option<(usize, usize)>,
    ) -> Result<Self> {
        let ids = ds.ids(split)?;
        if ids.is_empty() {
            return Err(Error::validation(format!("split `{split}` is empty")));
        }
        let mut images = Vec::new();
        let mut targets = Vec::new();
        let mut dims_hw = None;
        for id in ids {
            let mut v = ds.volume(id)?;
            let mut lung = ds.lung_mask(id)?;
            let mut inf = ds.infection_mask(id)?;
            if let Some((h, w)) = resize_hw {
                let target = (v.shape.0, h, w);
                v = resample_volume(&v, target, ResampleMode::Trilinear)?;
                lung = resample_mask(&lung, target)?;
                inf = resample_mask(&inf, target)?;
            }
            let (t, h, w) = v.shape;
            match dims_hw {
                None => dims_hw = Some((h, w)),
                Some(d) if d != (h, w) => {
                    return Err(Error::validation(format!(
                        "volume {id} has slice size {h}x{w}, expected {}x{}",
                        d.0, d.1
                    )));
                }
                _ => {}
            }
            let k = slices_per_volume.min(t).max(1);
            for s in 0..k {
                // evenly spaced, deterministic
                let ti = if k == 1 { t / 2 } else { s * (t - 1) / (k - 1) };
                let slice = v.slice(ti);
                match stage {
                    SegStage::Lung => {
                        images.push(slice.to_vec());
                        targets.push(lung.slice(ti).to_vec());
                    }
                    SegStage::Infection => {
                        images.push(apply_lung_mask(slice, lung.slice(ti))?);
                        targets.push(inf.slice(ti).to_vec());
                    }
                }
            }
        }
        let (h, w) = dims_hw.unwrap();
        Ok(SegDataset { images, targets, h, w })
    }
}

/// One classifier scan: channels already composed for the mode.
pub struct ClfItem {
    pub id: String,
    pub x: Vec<f32>,
    pub label: usize,
}

pub struct ClfDataset {
    pub items: Vec<ClfItem>,
    pub dims: Dims3,
    pub channels: usize,
    pub class_counts: [usize; 4],
}

impl ClfDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn load(
        ds: &Dataset,
        split: &str,
        mode: TrainMode,
        mask_source: &MaskSource,
        resize: Option<Dims3>,
    ) -> Result<Self> {
        let ids = ds.ids(split)?;
        if ids.is_empty() {
            return Err(Error::validation(format!("split `{split}` is empty")));
        }
        let channels = mode.channels();
        let mut items = Vec::with_capacity(ids.len());
        let mut dims = None;
        let mut class_counts = [0usize; 4];
        for id in ids {
            let mut v = ds.volume(id)?;
            if let Some(target) = resize {
                v = resample_volume(&v, target, ResampleMode::Trilinear)?;
            }
            let mask = match mode {
                TrainMode::Plain => None,
                TrainMode::LungAware | TrainMode::InfectionAware => {
                    let mut m = match (&mode, mask_source) {
                        (TrainMode::LungAware, MaskSource::Groundtruth) => ds.lung_mask(id),
                        (TrainMode::InfectionAware, MaskSource::Groundtruth) => {
                            ds.infection_mask(id)
                        }
                        (_, MaskSource::Predicted(dir)) => ds.mask_from(Path::new(dir), id),
                        _ => unreachable!(),
                    }
                    .map_err(|e| {
                        Error::validation(format!(
                            "mode `{}` needs masks but {id} has none: {e}",
                            mode.as_str()
                        ))
                    })?;
                    if let Some(target) = resize {
                        m = resample_mask(&m, target)?;
                    }
                    if m.shape != v.shape {
                        return Err(Error::validation(format!(
                            "mask shape {:?} does not match volume {:?} for {id}",
                            m.shape, v.shape
                        )));
                    }
                    Some(m)
                }
            };
            match dims {
                None => dims = Some(v.shape),
                Some(d) if d != v.shape => {
                    return Err(Error::validation(format!(
                        "volume {id} has shape {:?}, expected {d:?}",
                        v.shape
                    )));
                }
                _ => {}
            }
            let n = v.data.len();
            let mut x = Vec::with_capacity(channels * n);
            if let Some(m) = &mask {
                x.extend(m.data.iter().map(|b| *b as f32));
            }
            x.extend_from_slice(&v.data);
            let label = ds.severity(id)?.class_index();
            class_counts[label] += 1;
            items.push(ClfItem { id: id.clone(), x, label });
        }
        Ok(ClfDataset { items, dims: dims.unwrap(), channels, class_counts })
    }
}
