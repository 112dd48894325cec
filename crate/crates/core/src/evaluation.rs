//! Classification metrics, class activation maps, model ensembling and
//! report emission.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::SeverityNet;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::losses::NUM_CLASSES;
use crate::segmentation::{compose_classifier_input, iou, miou};
use crate::training::{MaskSource, TrainMode};
use crate::volumes::{
    resample_mask, resample_trilinear, resample_volume, CtVolume, Dims3, MaskVolume, ResampleMode,
};

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u32; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        ConfusionMatrix { counts: [[0; NUM_CLASSES]; NUM_CLASSES] }
    }

    pub fn from_pairs(truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::validation(format!(
                "confusion inputs differ in length: {} vs {}",
                truth.len(),
                pred.len()
            )));
        }
        let mut cm = ConfusionMatrix::new();
        for (&t, &p) in truth.iter().zip(pred) {
            cm.add(t, p)?;
        }
        Ok(cm)
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= NUM_CLASSES || pred >= NUM_CLASSES {
            return Err(Error::validation(format!("class index out of range: {truth}/{pred}")));
        }
        self.counts[truth][pred] += 1;
        Ok(())
    }

    pub fn total(&self) -> u32 {
        self.counts.iter().flatten().sum()
    }
}

impl Default for ConfusionMatrix {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-class F1 scores. A class that never occurs and is never predicted has
/// no defined F1; it is reported as 0 with its `absent` flag set.
pub fn f1_per_class(cm: &ConfusionMatrix) -> ([f64; NUM_CLASSES], [bool; NUM_CLASSES]) {
    let mut f1 = [0.0f64; NUM_CLASSES];
    let mut absent = [false; NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        let tp = cm.counts[c][c] as f64;
        let fp: f64 = (0..NUM_CLASSES).filter(|&r| r != c).map(|r| cm.counts[r][c] as f64).sum();
        let fn_: f64 = (0..NUM_CLASSES).filter(|&p| p != c).map(|p| cm.counts[c][p] as f64).sum();
        if tp + fp + fn_ == 0.0 {
            absent[c] = true;
            f1[c] = 0.0;
        } else if tp == 0.0 {
            f1[c] = 0.0;
        } else {
            let prec = tp / (tp + fp);
            let rec = tp / (tp + fn_);
            f1[c] = 2.0 * prec * rec / (prec + rec);
        }
    }
    (f1, absent)
}

/// Unweighted mean of the per-class F1 scores.
pub fn macro_f1(per_class: &[f64; NUM_CLASSES]) -> f64 {
    per_class.iter().sum::<f64>() / NUM_CLASSES as f64
}

/// Class activation map: weighted sum of feature maps, upsampled trilinearly
/// to `target`, then min-max normalized to [0,1] per volume.
pub fn compute_cam(
    feature_maps: &[f32],
    feat_dims: Dims3,
    class_weights_row: &[f32],
    target: Dims3,
) -> Result<Vec<f32>> {
    let spatial = feat_dims.0 * feat_dims.1 * feat_dims.2;
    let k = class_weights_row.len();
    if feature_maps.len() != k * spatial {
        return Err(Error::validation(format!(
            "feature maps have {} values, expected {k} channels x {spatial}",
            feature_maps.len()
        )));
    }
    let mut cam = vec![0.0f32; spatial];
    for c in 0..k {
        let w = class_weights_row[c];
        let f = &feature_maps[c * spatial..(c + 1) * spatial];
        for i in 0..spatial {
            cam[i] += w * f[i];
        }
    }
    let mut up = resample_trilinear(&cam, feat_dims, target);
    let lo = up.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = up.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if hi > lo {
        for v in up.iter_mut() {
            *v = (*v - lo) / (hi - lo);
        }
    } else {
        up.fill(0.0);
    }
    Ok(up)
}

fn softmax4(logits: &[f32]) -> [f64; NUM_CLASSES] {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut p = [0.0f64; NUM_CLASSES];
    let mut sum = 0.0;
    for c in 0..NUM_CLASSES {
        p[c] = ((logits[c] as f64) - max).exp();
        sum += p[c];
    }
    for v in p.iter_mut() {
        *v /= sum;
    }
    p
}

/// Probabilities from one model on a composed (mask, intensity) input; a
/// 1-channel model receives only the intensity channel.
pub fn model_probs(
    model: &SeverityNet,
    volume: &CtVolume,
    mask: Option<&MaskVolume>,
) -> Result<[f64; NUM_CLASSES]> {
    let dims = volume.shape;
    let tr = match model.cfg.in_channels {
        1 => model.forward(&model.params, &volume.data, dims)?,
        2 => {
            let mask = mask.ok_or_else(|| {
                Error::validation(format!(
                    "model needs a mask channel but none was provided for {}",
                    volume.id
                ))
            })?;
            let x = compose_classifier_input(volume, mask)?;
            model.forward(&model.params, &x, dims)?
        }
        c => return Err(Error::validation(format!("unsupported channel count {c}"))),
    };
    Ok(softmax4(&tr.logits))
}

/// Mean of per-model softmax probabilities. Ties in the argmax go to the
/// lowest (least severe) class index.
pub fn ensemble_predict(
    models: &[&SeverityNet],
    volume: &CtVolume,
    mask: Option<&MaskVolume>,
) -> Result<[f64; NUM_CLASSES]> {
    if models.is_empty() {
        return Err(Error::validation("ensemble needs at least one model"));
    }
    let mut acc = [0.0f64; NUM_CLASSES];
    for m in models {
        let p = model_probs(m, volume, mask)?;
        for c in 0..NUM_CLASSES {
            acc[c] += p[c];
        }
    }
    for v in acc.iter_mut() {
        *v /= models.len() as f64;
    }
    Ok(acc)
}

/// Argmax with ties broken toward the lowest class index.
pub fn predict_class(probs: &[f64; NUM_CLASSES]) -> usize {
    let mut best = 0;
    for c in 1..NUM_CLASSES {
        if probs[c] > probs[best] {
            best = c;
        }
    }
    best
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class_f1: [f64; NUM_CLASSES],
    pub macro_f1: f64,
    pub confusion: ConfusionMatrix,
    /// Classes absent from both truth and predictions (F1 reported as 0).
    pub absent_classes: [bool; NUM_CLASSES],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub infection_iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub infection_miou: Option<f64>,
    pub n_scans: usize,
    pub split: String,
    pub mode: String,
    pub config_hash: String,
    pub seed: u64,
    pub checkpoint_id: String,
    pub timestamp: String,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Resample volumes (and masks) to this shape before inference.
    pub resize: Option<Dims3>,
    /// Write CAM stacks (per-slice graymaps + raw heatmap) per scan.
    pub write_cam: bool,
    pub out_dir: Option<std::path::PathBuf>,
    pub checkpoint_id: String,
    pub config_hash: String,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            resize: None,
            write_cam: false,
            out_dir: None,
            checkpoint_id: String::new(),
            config_hash: String::new(),
            seed: 0,
        }
    }
}

/// Evaluate one or more (model, mode) pairs as a softmax-averaging ensemble
/// over a dataset split. Each model receives the mask its mode asks for.
pub fn evaluate(
    models: &[(&SeverityNet, TrainMode)],
    ds: &Dataset,
    split: &str,
    mask_source: &MaskSource,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    if models.is_empty() {
        return Err(Error::validation("ensemble needs at least one model"));
    }
    let ids = ds.ids(split)?;
    let mut cm = ConfusionMatrix::new();
    let mut mask_iou_sum = 0.0f64;
    let mut mask_miou_sum = 0.0f64;
    let mut mask_metrics_n = 0usize;
    for id in ids {
        let mut volume = ds.volume(id)?;
        if let Some(target) = opts.resize {
            volume = resample_volume(&volume, target, ResampleMode::Trilinear)?;
        }
        let fetch_mask = |kind: TrainMode| -> Result<MaskVolume> {
            let m = match (kind, mask_source) {
                (TrainMode::LungAware, MaskSource::Groundtruth) => ds.lung_mask(id)?,
                (TrainMode::InfectionAware, MaskSource::Groundtruth) => ds.infection_mask(id)?,
                (_, MaskSource::Predicted(dir)) => ds.mask_from(dir, id)?,
                (TrainMode::Plain, _) => unreachable!(),
            };
            match opts.resize {
                Some(target) => resample_mask(&m, target),
                None => Ok(m),
            }
        };
        let mut acc = [0.0f64; NUM_CLASSES];
        for (model, mode) in models {
            let mask = match mode {
                TrainMode::Plain => None,
                m => Some(fetch_mask(*m)?),
            };
            let p = model_probs(model, &volume, mask.as_ref())?;
            for c in 0..NUM_CLASSES {
                acc[c] += p[c];
            }
        }
        for v in acc.iter_mut() {
            *v /= models.len() as f64;
        }
        let pred = predict_class(&acc);
        let truth = ds.severity(id)?.class_index();
        cm.add(truth, pred)?;

        // mask quality vs ground truth when predictions drive the channel
        if let MaskSource::Predicted(dir) = mask_source {
            if let (Ok(pred_mask), Ok(gt_mask)) = (ds.mask_from(dir, id), ds.infection_mask(id)) {
                if pred_mask.shape == gt_mask.shape {
                    mask_iou_sum += iou(&pred_mask, &gt_mask)?;
                    mask_miou_sum += miou(&pred_mask, &gt_mask)?;
                    mask_metrics_n += 1;
                }
            }
        }

        if opts.write_cam {
            let dir = opts
                .out_dir
                .as_ref()
                .ok_or_else(|| Error::validation("write_cam needs an output directory"))?;
            let (model, mode) = &models[0];
            let mask = match mode {
                TrainMode::Plain => None,
                m => Some(fetch_mask(*m)?),
            };
            let x = match mask.as_ref() {
                Some(m) => compose_classifier_input(&volume, m)?,
                None => volume.data.clone(),
            };
            let (feat, feat_dims) = model.forward_feature_maps(&model.params, &x, volume.shape)?;
            let weights = model.head_weights(&model.params, pred);
            let cam = compute_cam(&feat, feat_dims, &weights, volume.shape)?;
            write_cam_stack(&dir.join("cam"), id, &cam, volume.shape)?;
        }
    }

    let (per_class_f1, absent_classes) = f1_per_class(&cm);
    let report = MetricsReport {
        per_class_f1,
        macro_f1: macro_f1(&per_class_f1),
        confusion: cm,
        absent_classes,
        infection_iou: (mask_metrics_n > 0).then(|| mask_iou_sum / mask_metrics_n as f64),
        infection_miou: (mask_metrics_n > 0).then(|| mask_miou_sum / mask_metrics_n as f64),
        n_scans: ids.len(),
        split: split.to_string(),
        mode: models
            .iter()
            .map(|(_, m)| m.as_str())
            .collect::<Vec<_>>()
            .join("+"),
        config_hash: opts.config_hash.clone(),
        seed: opts.seed,
        checkpoint_id: opts.checkpoint_id.clone(),
        timestamp: unix_timestamp(),
    };
    if let Some(dir) = &opts.out_dir {
        report.write(&dir.join("report.json"))?;
    }
    Ok(report)
}

fn unix_timestamp() -> String {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs().to_string())
        .unwrap_or_default()
}

/// Binary portable graymap (P5, maxval 255) for one slice.
pub fn write_pgm(path: &Path, data: &[f32], h: usize, w: usize) -> Result<()> {
    if data.len() != h * w {
        return Err(Error::validation(format!(
            "pgm buffer {} does not match {h}x{w}",
            data.len()
        )));
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes)?;
    Ok(())
}

/// CAM stack for one volume: per-slice PGM files plus the raw f32 heatmap
/// for exact numeric use.
pub fn write_cam_stack(dir: &Path, id: &str, cam: &[f32], dims: Dims3) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (t, h, w) = dims;
    for ti in 0..t {
        write_pgm(&dir.join(format!("{id}_slice{ti:03}.pgm")), &cam[ti * h * w..(ti + 1) * h * w], h, w)?;
    }
    let mut bytes = Vec::with_capacity(cam.len() * 4);
    for v in cam {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(dir.join(format!("{id}_cam.raw")), bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng as _;

    #[test]
    fn diagonal_confusion_gives_perfect_f1() {
        let mut cm = ConfusionMatrix::new();
        for c in 0..4 {
            for _ in 0..3 {
                cm.add(c, c).unwrap();
            }
        }
        let (f1, absent) = f1_per_class(&cm);
        assert_eq!(f1, [1.0; 4]);
        assert_eq!(absent, [false; 4]);
        assert_eq!(macro_f1(&f1), 1.0);
    }

    #[test]
    fn f1_precision_recall_arithmetic() {
        // class 0: TP=3, FP=1, FN=1 -> precision 3/4, recall 3/4, F1 3/4
        let mut cm = ConfusionMatrix::new();
        for _ in 0..3 {
            cm.add(0, 0).unwrap();
        }
        cm.add(1, 0).unwrap(); // FP for class 0
        cm.add(0, 1).unwrap(); // FN for class 0
        let (f1, _) = f1_per_class(&cm);
        assert!((f1[0] - 0.75).abs() < 1e-12, "{}", f1[0]);
    }

    #[test]
    fn one_class_predictions_zero_out_the_rest() {
        let truth = vec![0, 1, 2, 3, 0, 1, 2, 3];
        let pred = vec![0; 8];
        let cm = ConfusionMatrix::from_pairs(&truth, &pred).unwrap();
        let (f1, absent) = f1_per_class(&cm);
        assert!(f1[1] == 0.0 && f1[2] == 0.0 && f1[3] == 0.0);
        assert!(f1[0] > 0.0);
        assert_eq!(absent, [false; 4]);
    }

    #[test]
    fn absent_class_is_flagged() {
        let cm = ConfusionMatrix::from_pairs(&[0, 1, 0], &[0, 1, 1]).unwrap();
        let (_, absent) = f1_per_class(&cm);
        assert_eq!(absent, [false, false, true, true]);
    }

    #[test]
    fn macro_f1_reference_rows() {
        // published per-class rows reproduce their macro scores
        let a = [79.07, 78.26, 75.56, 54.55];
        assert!((macro_f1(&a) - 71.86).abs() < 0.005);
        let b = [83.72, 66.67, 74.42, 83.33];
        assert!((macro_f1(&b) - 77.03).abs() < 0.005);
        let f = [0.4; 4];
        assert!((macro_f1(&f) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn cam_uniform_features_give_flat_map() {
        // f_k constant; weighted sum constant; degenerate range maps to 0
        let feat = vec![0.5f32; 3 * 8];
        let cam = compute_cam(&feat, (2, 2, 2), &[0.1, 0.2, 0.3], (4, 4, 4)).unwrap();
        assert!(cam.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cam_one_hot_weights_select_one_map() {
        let dims = (2, 2, 2);
        let mut feat = vec![0.0f32; 2 * 8];
        for i in 0..8 {
            feat[i] = i as f32; // channel 0
            feat[8 + i] = 100.0 - i as f32; // channel 1 (ignored)
        }
        let cam = compute_cam(&feat, dims, &[1.0, 0.0], dims).unwrap();
        // equals channel 0 min-max normalized
        for i in 0..8 {
            assert!((cam[i] - i as f32 / 7.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cam_matches_nested_loop_oracle() {
        let dims = (2, 2, 2);
        let mut r = crate::rng::stream(19, "cam-oracle", 0);
        let k = 3;
        let feat: Vec<f32> = (0..k * 8).map(|_| r.gen_range(-1.0..1.0f32)).collect();
        let w: Vec<f32> = (0..k).map(|_| r.gen_range(-1.0..1.0f32)).collect();
        // oracle: explicit double loop, pre-normalization
        let mut oracle = vec![0.0f32; 8];
        for (ki, wk) in w.iter().enumerate() {
            for i in 0..8 {
                oracle[i] += wk * feat[ki * 8 + i];
            }
        }
        let lo = oracle.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = oracle.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let cam = compute_cam(&feat, dims, &w, dims).unwrap();
        for i in 0..8 {
            let want = (oracle[i] - lo) / (hi - lo);
            assert!((cam[i] - want).abs() < 1e-5, "{} vs {want}", cam[i]);
        }
    }

    #[test]
    fn predict_class_breaks_ties_low() {
        assert_eq!(predict_class(&[0.4, 0.4, 0.1, 0.1]), 0);
        assert_eq!(predict_class(&[0.1, 0.4, 0.4, 0.1]), 1);
        assert_eq!(predict_class(&[0.1, 0.1, 0.2, 0.6]), 3);
    }

    #[test]
    fn f1_matches_bruteforce_oracle_on_random_vectors() {
        let mut r = crate::rng::stream(23, "f1-oracle", 0);
        for _ in 0..1000 {
            let n = r.gen_range(1..=50usize);
            let truth: Vec<usize> = (0..n).map(|_| r.gen_range(0..4)).collect();
            let pred: Vec<usize> = (0..n).map(|_| r.gen_range(0..4)).collect();
            let cm = ConfusionMatrix::from_pairs(&truth, &pred).unwrap();
            let (f1, _) = f1_per_class(&cm);
            // oracle: count tp/fp/fn per class straight from the vectors
            for c in 0..4 {
                let tp = truth.iter().zip(&pred).filter(|(t, p)| **t == c && **p == c).count() as f64;
                let fp = truth.iter().zip(&pred).filter(|(t, p)| **t != c && **p == c).count() as f64;
                let fnn = truth.iter().zip(&pred).filter(|(t, p)| **t == c && **p != c).count() as f64;
                let want = if tp + fp + fnn == 0.0 || tp == 0.0 {
                    0.0
                } else {
                    2.0 * tp / (2.0 * tp + fp + fnn)
                };
                assert!((f1[c] - want).abs() < 1e-9, "class {c}: {} vs {want}", f1[c]);
            }
            let m = macro_f1(&f1);
            assert!((m - f1.iter().sum::<f64>() / 4.0).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn macro_f1_invariant_under_relabeling(seed in 0u64..100) {
            let mut r = crate::rng::stream(seed, "relabel", 0);
            let n = 40usize;
            let truth: Vec<usize> = (0..n).map(|_| r.gen_range(0..4)).collect();
            let pred: Vec<usize> = (0..n).map(|_| r.gen_range(0..4)).collect();
            // random permutation of class labels
            use rand::seq::SliceRandom;
            let mut perm = [0usize, 1, 2, 3];
            perm.shuffle(&mut r);
            let t2: Vec<usize> = truth.iter().map(|&c| perm[c]).collect();
            let p2: Vec<usize> = pred.iter().map(|&c| perm[c]).collect();
            let (f1a, _) = f1_per_class(&ConfusionMatrix::from_pairs(&truth, &pred).unwrap());
            let (f1b, _) = f1_per_class(&ConfusionMatrix::from_pairs(&t2, &p2).unwrap());
            prop_assert!((macro_f1(&f1a) - macro_f1(&f1b)).abs() < 1e-12);
        }
    }
}
