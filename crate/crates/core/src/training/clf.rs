//! Classifier training. Each step: sample a batch of scans, make two
//! augmented views per scan, run the contrastive loss on projections, mix
//! the views and run the mixup loss, run weighted cross-entropy on the raw
//! views, combine with learned sigma weights, and take one optimizer step
//! over network parameters and the log-sigmas together.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::classifier::{augment_two_views, build_model, ClassifierConfig, SeverityNet};
use crate::error::{Error, Result};
use crate::evaluation::{f1_per_class, macro_f1, predict_class, ConfusionMatrix};
use crate::losses::{
    adaptive_joint_loss_grad, class_weights_from_counts, mixup_loss_grad, mixup_pair,
    supervised_contrastive_loss_grad, weighted_ce_grad, AdaptiveWeights, ClassWeights,
    ContrastiveBatch, NUM_CLASSES,
};
use crate::nn::optim::{Adam, Sgd};
use crate::rng;
use crate::training::{
    lr_schedule, run_chunked, ClfCheckpoint, ClfDataset, EpochMetrics, OptimizerKind, TrainConfig,
    TrainMode,
};

pub struct ClfTrainOutcome {
    pub model: SeverityNet,
    pub best_params: Vec<f32>,
    pub best_epoch: usize,
    pub best_macro_f1: f64,
    pub final_checkpoint: ClfCheckpoint,
    pub loss_trace: Vec<f64>,
    pub history: Vec<EpochMetrics>,
}

enum Opt {
    Sgd(Sgd),
    Adam(Adam),
}

impl Opt {
    fn new(kind: OptimizerKind, n: usize, momentum: f32) -> Self {
        match kind {
            OptimizerKind::Sgd => Opt::Sgd(Sgd::new(n, momentum)),
            OptimizerKind::Adam => Opt::Adam(Adam::new(n)),
        }
    }

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

    fn load_state(&mut self, s: &[f32]) {
        match self {
            Opt::Sgd(o) => o.load_state(s),
            Opt::Adam(o) => o.load_state(s),
        }
    }
}

/// Macro F1 of a model over a dataset (eval mode, no augmentation).
pub fn eval_macro_f1(
    model: &SeverityNet,
    params: &[f32],
    data: &ClfDataset,
    workers: usize,
) -> Result<f64> {
    let preds = run_chunked(data.len(), workers, |i| {
        let tr = model
            .forward(params, &data.items[i].x, data.dims)
            .expect("val scan incompatible with model");
        let mut probs = [0.0f64; NUM_CLASSES];
        for c in 0..NUM_CLASSES {
            probs[c] = tr.logits[c] as f64;
        }
        predict_class(&probs)
    });
    let mut cm = ConfusionMatrix::new();
    for (i, p) in preds.iter().enumerate() {
        cm.add(data.items[i].label, *p)?;
    }
    let (f1, _) = f1_per_class(&cm);
    Ok(macro_f1(&f1))
}

pub fn train_classifier(
    cfg: &TrainConfig,
    clf_cfg: &ClassifierConfig,
    mode: TrainMode,
    train: &ClfDataset,
    val: &ClfDataset,
    out_dir: Option<&Path>,
    resume: Option<&ClfCheckpoint>,
) -> Result<ClfTrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::validation("training split is empty"));
    }
    if clf_cfg.in_channels != mode.channels() {
        return Err(Error::validation(format!(
            "mode `{}` needs {} input channels, config has {}",
            mode.as_str(),
            mode.channels(),
            clf_cfg.in_channels
        )));
    }
    if train.channels != clf_cfg.in_channels {
        return Err(Error::validation(format!(
            "dataset provides {} channels, config expects {}",
            train.channels, clf_cfg.in_channels
        )));
    }

    let mut model = build_model(clf_cfg)?;
    let n_params = model.n_params();
    let weights = class_weights_from_counts(train.class_counts)?;
    let mut opt = Opt::new(cfg.optimizer, n_params, cfg.momentum);
    // log sigmas live in their own tiny parameter vector, no weight decay
    let mut sigmas = vec![0.0f32; 2];
    let mut sigma_opt = Opt::new(cfg.optimizer, 2, cfg.momentum);

    let mut start_epoch = 0usize;
    let mut best_params = model.params.clone();
    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    if let Some(ck) = resume {
        if ck.config != *clf_cfg {
            return Err(Error::validation(
                "resume checkpoint architecture differs from requested config",
            ));
        }
        model.params.copy_from_slice(&ck.params);
        opt.load_state(&ck.opt_state);
        sigmas.copy_from_slice(&ck.sigmas);
        sigma_opt.load_state(&ck.sigma_opt_state);
        start_epoch = ck.epoch + 1;
        best_f1 = ck.best_metric;
        best_params.copy_from_slice(&ck.params);
        best_epoch = ck.epoch;
    }

    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(fs::File::create(dir.join("clf_metrics.jsonl"))?)
        }
        None => None,
    };

    let dims = train.dims;
    let mut loss_trace = Vec::new();
    let mut history = Vec::new();

    for epoch in start_epoch..cfg.epochs {
        let lr = lr_schedule(epoch, cfg)?;
        let mut erng = rng::stream(cfg.seed, "clf-epoch", epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut erng);

        for batch in order.chunks(cfg.batch_size) {
            let step_seed: u64 = erng.gen();
            let loss = train_step(
                cfg, &mut model, &mut opt, &mut sigmas, &mut sigma_opt, &weights, train, batch,
                dims, lr, step_seed, mode,
            )?;
            if !loss.is_finite() {
                return Err(Error::runtime(format!(
                    "non-finite training loss at epoch {epoch}"
                )));
            }
            loss_trace.push(loss);
        }

        let val_f1 = if val.is_empty() {
            f64::NAN
        } else {
            eval_macro_f1(&model, &model.params, val, cfg.workers)?
        };
        let w = AdaptiveWeights {
            log_sigma1: sigmas[0] as f64,
            log_sigma2: sigmas[1] as f64,
        };
        let rec = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_trace.last().copied().unwrap_or(f64::NAN),
            val_metric: val_f1,
            sigma1: Some(w.sigma1()),
            sigma2: Some(w.sigma2()),
        };
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&rec)?)?;
        }
        history.push(rec);
        if val_f1 > best_f1 {
            best_f1 = val_f1;
            best_epoch = epoch;
            best_params.copy_from_slice(&model.params);
        }
    }

    let final_checkpoint = ClfCheckpoint {
        config: clf_cfg.clone(),
        mode,
        params: model.params.clone(),
        opt_state: opt.state(),
        sigmas: sigmas.clone(),
        sigma_opt_state: sigma_opt.state(),
        epoch: cfg.epochs.saturating_sub(1),
        best_metric: best_f1,
        seed: cfg.seed,
    };

    Ok(ClfTrainOutcome {
        model,
        best_params,
        best_epoch,
        best_macro_f1: best_f1,
        final_checkpoint,
        loss_trace,
        history,
    })
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    cfg: &TrainConfig,
    model: &mut SeverityNet,
    opt: &mut Opt,
    sigmas: &mut [f32],
    sigma_opt: &mut Opt,
    weights: &ClassWeights,
    train: &ClfDataset,
    batch: &[usize],
    dims: crate::volumes::Dims3,
    lr: f64,
    step_seed: u64,
    _mode: TrainMode,
) -> Result<f64> {
    let channels = train.channels;
    let n_params = model.n_params();

    // two augmented views per scan; the label rides along unchanged
    let mut view_seeds = Vec::with_capacity(batch.len());
    let mut srng = rng::stream(step_seed, "clf-views", 0);
    for _ in batch {
        view_seeds.push(srng.gen::<u64>());
    }
    let views: Vec<(Vec<f32>, usize)> = run_chunked(batch.len(), cfg.workers, |bi| {
        let item = &train.items[batch[bi]];
        let mut arng = rng::stream(view_seeds[bi], "augment", 0);
        let (a, b) = augment_two_views(&item.x, channels, dims, &model.cfg, &mut arng);
        vec![(a, item.label), (b, item.label)]
    })
    .into_iter()
    .flatten()
    .collect();
    let n_views = views.len();

    // mixup companions: permutation over the 2N views, one lambda per step
    let (mix_inputs, mix_targets): (Vec<Vec<f32>>, Vec<[f64; NUM_CLASSES]>) = if cfg.use_mixup {
        let mut perm: Vec<usize> = (0..n_views).collect();
        let mut mrng = rng::stream(step_seed, "mixup", 0);
        perm.shuffle(&mut mrng);
        let lambda = if cfg.mixup_alpha > 0.0 {
            Beta::new(cfg.mixup_alpha, cfg.mixup_alpha)
                .map_err(|e| Error::validation(format!("bad mixup alpha: {e}")))?
                .sample(&mut mrng)
        } else {
            1.0
        };
        let mut inputs = Vec::with_capacity(n_views);
        let mut targets = Vec::with_capacity(n_views);
        for i in 0..n_views {
            let (xi, yi) = &views[i];
            let (xp, yp) = &views[perm[i]];
            let mut onehot_i = [0.0f64; NUM_CLASSES];
            onehot_i[*yi] = 1.0;
            let mut onehot_p = [0.0f64; NUM_CLASSES];
            onehot_p[*yp] = 1.0;
            let (xm, ym) = mixup_pair(xi, &onehot_i, xp, &onehot_p, lambda)?;
            inputs.push(xm);
            targets.push(ym);
        }
        (inputs, targets)
    } else {
        (Vec::new(), Vec::new())
    };

    // forward passes
    let view_traces = run_chunked(n_views, cfg.workers, |i| {
        model.forward(&model.params, &views[i].0, dims).expect("view forward failed")
    });
    let mix_traces = run_chunked(mix_inputs.len(), cfg.workers, |i| {
        model.forward(&model.params, &mix_inputs[i], dims).expect("mix forward failed")
    });

    // losses in f64
    let labels: Vec<usize> = views.iter().map(|(_, y)| *y).collect();
    let view_logits: Vec<[f64; NUM_CLASSES]> = view_traces
        .iter()
        .map(|tr| {
            let mut l = [0.0f64; NUM_CLASSES];
            for c in 0..NUM_CLASSES {
                l[c] = tr.logits[c] as f64;
            }
            l
        })
        .collect();

    let (mean_con, dz) = if cfg.use_contrastive {
        let d_p = model.cfg.d_p;
        let mut z = Vec::with_capacity(n_views * d_p);
        for tr in &view_traces {
            z.extend(tr.projection.iter().map(|v| *v as f64));
        }
        let cb = ContrastiveBatch {
            z,
            dim: d_p,
            labels: labels.clone(),
            temperature: cfg.temperature,
        };
        let (l, g) = supervised_contrastive_loss_grad(&cb)?;
        (l, g)
    } else {
        (0.0, Vec::new())
    };

    let (mean_mix, dmix) = if cfg.use_mixup {
        let mix_logits: Vec<[f64; NUM_CLASSES]> = mix_traces
            .iter()
            .map(|tr| {
                let mut l = [0.0f64; NUM_CLASSES];
                for c in 0..NUM_CLASSES {
                    l[c] = tr.logits[c] as f64;
                }
                l
            })
            .collect();
        let (l, g) = mixup_loss_grad(&mix_logits, &mix_targets)?;
        (l, g)
    } else {
        (0.0, Vec::new())
    };

    let (mean_clf, dclf) = weighted_ce_grad(&view_logits, &labels, weights)?;

    // joint combination; disabled branches contribute nothing and their
    // sigma is frozen
    let w = AdaptiveWeights { log_sigma1: sigmas[0] as f64, log_sigma2: sigmas[1] as f64 };
    let (joint, c1, c2) = if cfg.adaptive_weights {
        let l_con = vec![if cfg.use_contrastive { mean_con } else { 0.0 }; 1];
        let l_mix = vec![if cfg.use_mixup { mean_mix } else { 0.0 }; 1];
        let l_clf = vec![mean_clf; 1];
        let (joint, dsig, coeff) = adaptive_joint_loss_grad(&l_con, &l_mix, &l_clf, &w)?;
        let mut sig_grads = [0.0f32; 2];
        if cfg.use_contrastive {
            sig_grads[0] = dsig[0] as f32;
        }
        sig_grads[1] = dsig[1] as f32;
        sigma_opt.step(sigmas, &sig_grads, lr as f32, 0.0);
        // when contrastive is off its sigma term is dropped from the loss
        let joint = if cfg.use_contrastive { joint } else { joint - w.log_sigma1 };
        (joint, coeff[0], coeff[1])
    } else {
        (mean_con + mean_mix + mean_clf, 1.0, 1.0)
    };

    // backward: per-view gradients scaled by the sigma coefficients
    let d_p = model.cfg.d_p;
    let zero_proj = vec![0.0f32; d_p];
    let nchunks = cfg.workers.min(n_views);
    let total_passes = n_views + mix_traces.len();
    let chunk_grads = run_chunked(nchunks, nchunks, |ci| {
        let mut g = vec![0.0f32; n_params];
        let chunk = total_passes.div_ceil(nchunks);
        let lo = (ci * chunk).min(total_passes);
        let hi = ((ci + 1) * chunk).min(total_passes);
        for idx in lo..hi {
            if idx < n_views {
                let dproj: Vec<f32> = if cfg.use_contrastive {
                    dz[idx * d_p..(idx + 1) * d_p].iter().map(|v| (*v * c1) as f32).collect()
                } else {
                    zero_proj.clone()
                };
                let mut dlogits = [0.0f32; NUM_CLASSES];
                for c in 0..NUM_CLASSES {
                    dlogits[c] = (dclf[idx][c] * c2) as f32;
                }
                model.backward(&model.params, &view_traces[idx], &dproj, &dlogits, &mut g);
            } else {
                let mi = idx - n_views;
                let mut dlogits = [0.0f32; NUM_CLASSES];
                for c in 0..NUM_CLASSES {
                    dlogits[c] = (dmix[mi][c] * c2) as f32;
                }
                model.backward(&model.params, &mix_traces[mi], &zero_proj, &dlogits, &mut g);
            }
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

    Ok(joint)
}
