//! Slice-wise segmentation: Dice loss, IoU metrics, the U-shaped
//! segmentation network, mask application and the two-stage
//! lung-then-lesion inference cascade.

mod unet;

pub use unet::{SegConfig, UNet2d};

use crate::error::{Error, Result};
use crate::volumes::{CtVolume, MaskKind, MaskVolume};

/// Per-sample soft Dice loss `1 - 2*sum(p*t) / (sum(p) + sum(t) + eps)`,
/// averaged over the batch.
pub fn dice_loss(pred: &[f64], target: &[f64], batch: usize, eps: f64) -> Result<f64> {
    Ok(dice_internal(pred, target, batch, eps)?.0)
}

/// Dice loss and its gradient w.r.t. `pred`.
pub fn dice_loss_grad(
    pred: &[f64],
    target: &[f64],
    batch: usize,
    eps: f64,
) -> Result<(f64, Vec<f64>)> {
    let (loss, grad) = dice_internal(pred, target, batch, eps)?;
    Ok((loss, grad))
}

fn dice_internal(
    pred: &[f64],
    target: &[f64],
    batch: usize,
    eps: f64,
) -> Result<(f64, Vec<f64>)> {
    if eps <= 0.0 {
        return Err(Error::validation(format!("dice eps {eps} must be > 0")));
    }
    if pred.len() != target.len() {
        return Err(Error::validation(format!(
            "dice shape mismatch: {} pred vs {} target",
            pred.len(),
            target.len()
        )));
    }
    if batch == 0 || pred.len() % batch != 0 {
        return Err(Error::validation(format!(
            "batch {batch} does not divide {} elements",
            pred.len()
        )));
    }
    if let Some(i) = pred.iter().position(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::validation(format!(
            "dice pred outside [0,1] at index {i}: {}",
            pred[i]
        )));
    }
    let per = pred.len() / batch;
    let mut loss = 0.0;
    let mut grad = vec![0.0f64; pred.len()];
    for b in 0..batch {
        let p = &pred[b * per..(b + 1) * per];
        let t = &target[b * per..(b + 1) * per];
        let inter: f64 = p.iter().zip(t).map(|(a, c)| a * c).sum();
        let sums: f64 = p.iter().sum::<f64>() + t.iter().sum::<f64>();
        let den = sums + eps;
        loss += 1.0 - 2.0 * inter / den;
        let g = &mut grad[b * per..(b + 1) * per];
        for i in 0..per {
            g[i] = (-2.0 * t[i] / den + 2.0 * inter / (den * den)) / batch as f64;
        }
    }
    Ok((loss / batch as f64, grad))
}

/// Hadamard product of a slice with a binary mask.
pub fn apply_lung_mask(slice: &[f32], mask: &[u8]) -> Result<Vec<f32>> {
    if slice.len() != mask.len() {
        return Err(Error::validation(format!(
            "mask shape mismatch: {} pixels vs {} mask",
            slice.len(),
            mask.len()
        )));
    }
    Ok(slice.iter().zip(mask).map(|(x, m)| x * (*m as f32)).collect())
}

/// Anything that can score a single (H, W) slice with per-pixel foreground
/// probabilities. Lets tests drive `segment_volume` with stub models.
pub trait SliceSegmenter {
    fn predict_slice(&self, slice: &[f32], h: usize, w: usize) -> Vec<f32>;
}

/// Run a slice segmenter independently over every slice of a normalized
/// volume and binarize at `threshold`.
pub fn segment_volume<M: SliceSegmenter>(
    model: &M,
    v: &CtVolume,
    threshold: f32,
    kind: MaskKind,
) -> Result<MaskVolume> {
    if !v.normalized {
        return Err(Error::validation(format!("volume {} is not normalized", v.id)));
    }
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(Error::validation(format!("threshold {threshold} outside (0,1)")));
    }
    let (t, h, w) = v.shape;
    let mut data = Vec::with_capacity(t * h * w);
    for ti in 0..t {
        let probs = model.predict_slice(v.slice(ti), h, w);
        debug_assert_eq!(probs.len(), h * w);
        data.extend(probs.iter().map(|p| (*p >= threshold) as u8));
    }
    MaskVolume::new(data, v.shape, kind)
}

/// Two-step cascade: lung mask from the first model gates the input and the
/// output of the second; lesion predictions outside the predicted lung are
/// impossible by construction.
pub fn two_stage_inference<M1: SliceSegmenter, M2: SliceSegmenter>(
    lung_model: &M1,
    infection_model: &M2,
    v: &CtVolume,
    threshold: f32,
) -> Result<MaskVolume> {
    if !v.normalized {
        return Err(Error::validation(format!("volume {} is not normalized", v.id)));
    }
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(Error::validation(format!("threshold {threshold} outside (0,1)")));
    }
    let (t, h, w) = v.shape;
    let mut data = Vec::with_capacity(t * h * w);
    for ti in 0..t {
        let slice = v.slice(ti);
        let lung_prob = lung_model.predict_slice(slice, h, w);
        let lung: Vec<u8> = lung_prob.iter().map(|p| (*p >= threshold) as u8).collect();
        let masked = apply_lung_mask(slice, &lung)?;
        let inf_prob = infection_model.predict_slice(&masked, h, w);
        data.extend(
            inf_prob.iter().zip(&lung).map(|(p, l)| ((*p >= threshold) as u8) & l),
        );
    }
    MaskVolume::new(data, v.shape, MaskKind::Infection)
}

/// Stack an infection mask (channel 0) and volume intensities (channel 1)
/// into the classifier's `(2, T, H, W)` input.
pub fn compose_classifier_input(v: &CtVolume, infection: &MaskVolume) -> Result<Vec<f32>> {
    if v.shape != infection.shape {
        return Err(Error::validation(format!(
            "volume shape {:?} differs from mask shape {:?}",
            v.shape, infection.shape
        )));
    }
    let n = v.data.len();
    let mut out = Vec::with_capacity(2 * n);
    out.extend(infection.data.iter().map(|m| *m as f32));
    out.extend_from_slice(&v.data);
    Ok(out)
}

/// Intersection-over-union of two binary masks; both empty counts as 1.
pub fn iou(pred: &MaskVolume, gt: &MaskVolume) -> Result<f64> {
    if pred.shape != gt.shape {
        return Err(Error::validation(format!(
            "IoU shape mismatch: {:?} vs {:?}",
            pred.shape, gt.shape
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (a, b) in pred.data.iter().zip(&gt.data) {
        inter += (*a & *b) as usize;
        union += (*a | *b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean IoU over {background, foreground}.
pub fn miou(pred: &MaskVolume, gt: &MaskVolume) -> Result<f64> {
    let fg = iou(pred, gt)?;
    let invert = |m: &MaskVolume| MaskVolume {
        data: m.data.iter().map(|v| 1 - v).collect(),
        shape: m.shape,
        kind: m.kind,
    };
    let bg = iou(&invert(pred), &invert(gt))?;
    Ok(0.5 * (fg + bg))
}
