//! Segmentation training: Dice loss, per-epoch validation mIoU, best-mIoU
//! checkpoint selection, optional early stop at a target mIoU.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::nn::optim::{Adam, Sgd};
use crate::rng;
use crate::segmentation::{dice_loss_grad, SegConfig, UNet2d};
use crate::training::{
    lr_schedule, run_chunked, EpochMetrics, OptimizerKind, SegDataset, TrainConfig,
};

pub struct SegTrainOutcome {
    pub model: UNet2d,
    pub best_params: Vec<f32>,
    pub best_epoch: usize,
    pub best_miou: f64,
    pub best_fg_iou: f64,
    pub opt_state: Vec<f32>,
    pub loss_trace: Vec<f64>,
    pub history: Vec<EpochMetrics>,
}

enum Opt {
    Sgd(Sgd),
    Adam(Adam),
}

impl Opt {
    fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f32, wd: f32) {
        match self {
            Opt::Sgd(o) => o.step(params, grads, lr, wd),
            Opt::Adam(o) => o.step(params, grads, lr, wd),
        }
    }

    fn state(&self) -> Vec<f32> {
        match self {
            Opt::Sgd(o) => o.state().to_vec(),
            Opt::Adam(o) => o.state(),
        }
    }
}

/// Aggregate foreground/background IoU over a whole slice set.
pub fn eval_seg(model: &UNet2d, params: &[f32], data: &SegDataset, workers: usize) -> (f64, f64) {
    let counts = run_chunked(data.len(), workers, |i| {
        let probs = model
            .predict_with(params, &data.images[i], data.h, data.w)
            .expect("val slice incompatible with model");
        let mut fg_inter = 0u64;
        let mut fg_union = 0u64;
        let mut bg_inter = 0u64;
        let mut bg_union = 0u64;
        for (p, t) in probs.iter().zip(&data.targets[i]) {
            let pb = (*p >= 0.5) as u8;
            let tb = *t;
            fg_inter += (pb & tb) as u64;
            fg_union += (pb | tb) as u64;
            bg_inter += ((1 - pb) & (1 - tb)) as u64;
            bg_union += ((1 - pb) | (1 - tb)) as u64;
        }
        (fg_inter, fg_union, bg_inter, bg_union)
    });
    let (mut fi, mut fu, mut bi, mut bu) = (0u64, 0u64, 0u64, 0u64);
    for (a, b, c, d) in counts {
        fi += a;
        fu += b;
        bi += c;
        bu += d;
    }
    let fg = if fu == 0 { 1.0 } else { fi as f64 / fu as f64 };
    let bg = if bu == 0 { 1.0 } else { bi as f64 / bu as f64 };
    (0.5 * (fg + bg), fg)
}

pub fn train_segmentation(
    cfg: &TrainConfig,
    seg_cfg: &SegConfig,
    train: &SegDataset,
    val: &SegDataset,
    out_dir: Option<&Path>,
) -> Result<SegTrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::validation("training split is empty"));
    }
    let mut model = UNet2d::new(seg_cfg.clone())?;
    let n_params = model.n_params();
    let mut opt = match cfg.optimizer {
        OptimizerKind::Sgd => Opt::Sgd(Sgd::new(n_params, cfg.momentum)),
        OptimizerKind::Adam => Opt::Adam(Adam::new(n_params)),
    };

    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(fs::File::create(dir.join("seg_metrics.jsonl"))?)
        }
        None => None,
    };

    let (h, w) = (train.h, train.w);
    let per_slice = h * w;
    let mut loss_trace: Vec<f64> = Vec::new();
    let mut history = Vec::new();
    let mut best_params = model.params.clone();
    let mut best_miou = f64::NEG_INFINITY;
    let mut best_fg = 0.0;
    let mut best_epoch = 0;

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg)?;
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut erng = rng::stream(cfg.seed, "seg-epoch", epoch as u64);
        order.shuffle(&mut erng);

        for batch in order.chunks(cfg.batch_size) {
            // forward every slice of the batch in parallel chunks
            let traces = run_chunked(batch.len(), cfg.workers, |bi| {
                model.forward_trace(&model.params, &train.images[batch[bi]], h, w)
            });
            // batched dice over all slices
            let mut pred = Vec::with_capacity(batch.len() * per_slice);
            let mut target = Vec::with_capacity(batch.len() * per_slice);
            for (bi, tr) in traces.iter().enumerate() {
                pred.extend(tr.probs.iter().map(|p| (*p as f64).clamp(0.0, 1.0)));
                target.extend(train.targets[batch[bi]].iter().map(|t| *t as f64));
            }
            let (loss, dpred) = dice_loss_grad(&pred, &target, batch.len(), 1e-6)?;
            if !loss.is_finite() {
                return Err(Error::runtime(format!(
                    "non-finite training loss at epoch {epoch}"
                )));
            }
            loss_trace.push(loss);

            // backward in parallel chunks, one gradient buffer per chunk
            let nchunks = cfg.workers.min(batch.len());
            let chunk_grads = run_chunked(nchunks, nchunks, |ci| {
                let mut g = vec![0.0f32; n_params];
                let chunk = batch.len().div_ceil(nchunks);
                let lo = (ci * chunk).min(batch.len());
                let hi = ((ci + 1) * chunk).min(batch.len());
                for bi in lo..hi {
                    let dprobs: Vec<f32> = dpred[bi * per_slice..(bi + 1) * per_slice]
                        .iter()
                        .map(|v| *v as f32)
                        .collect();
                    model.backward(&model.params, &traces[bi], h, w, &dprobs, &mut g);
                }
                g
            });
            let mut grads = vec![0.0f32; n_params];
            for g in &chunk_grads {
                for i in 0..n_params {
                    grads[i] += g[i];
                }
            }
            if let Some(max_norm) = cfg.grad_clip {
                crate::nn::clip_grad_norm(&mut grads, max_norm);
            }
            opt.step(&mut model.params, &grads, lr as f32, cfg.weight_decay);
        }

        let (val_miou, val_fg) = if val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            eval_seg(&model, &model.params, val, cfg.workers)
        };
        let train_loss = loss_trace.last().copied().unwrap_or(f64::NAN);
        let rec = EpochMetrics {
            epoch,
            lr,
            train_loss,
            val_metric: val_miou,
            sigma1: None,
            sigma2: None,
        };
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&rec)?)?;
        }
        history.push(rec);
        if val_miou > best_miou {
            best_miou = val_miou;
            best_fg = val_fg;
            best_epoch = epoch;
            best_params.copy_from_slice(&model.params);
        }
        if let Some(stop) = cfg.seg_stop_miou {
            if val_miou >= stop {
                break;
            }
        }
    }

    Ok(SegTrainOutcome {
        best_params,
        best_epoch,
        best_miou,
        best_fg_iou: best_fg,
        opt_state: opt.state(),
        loss_trace,
        history,
        model,
    })
}
