//! Optimization loops for segmentation and classification, the learning
//! rate schedule, and checkpointing.

pub mod checkpoint;
mod clf;
mod data;
mod seg;

pub use checkpoint::{load_clf_checkpoint, load_seg_checkpoint, ClfCheckpoint, SegCheckpoint};
pub use clf::{train_classifier, ClfTrainOutcome};
pub use data::{ClfDataset, SegDataset, SegStage};
pub use seg::{eval_seg, train_segmentation, SegTrainOutcome};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Seg,
    Clf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::validation(format!("unknown optimizer `{s}` (sgd|adam)"))),
        }
    }
}

/// Which mask rides in the classifier's first channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Plain,
    LungAware,
    InfectionAware,
}

impl TrainMode {
    pub fn channels(self) -> usize {
        match self {
            TrainMode::Plain => 1,
            _ => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Plain => "plain",
            TrainMode::LungAware => "lung_aware",
            TrainMode::InfectionAware => "infection_aware",
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(TrainMode::Plain),
            "lung_aware" => Ok(TrainMode::LungAware),
            "infection_aware" => Ok(TrainMode::InfectionAware),
            _ => Err(Error::validation(format!(
                "unknown mode `{s}` (plain|lung_aware|infection_aware)"
            ))),
        }
    }
}

/// Where the classifier's mask channel comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MaskSource {
    /// Ground-truth masks shipped with the dataset.
    Groundtruth,
    /// Predicted masks from a directory with the dataset mask layout.
    Predicted(std::path::PathBuf),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub task: Task,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f32,
    pub optimizer: OptimizerKind,
    /// LR is divided by 10 at these fractions of total epochs.
    pub milestones: (f64, f64),
    pub momentum: f32,
    pub seed: u64,
    pub temperature: f64,
    pub mixup_alpha: f64,
    pub use_contrastive: bool,
    pub use_mixup: bool,
    /// Learn the loss-balancing sigmas; when off, enabled branches are
    /// summed with unit weights and no log terms.
    pub adaptive_weights: bool,
    pub grad_clip: Option<f32>,
    /// Parallel workers for per-sample forward/backward. Results are
    /// deterministic per (seed, workers) pair.
    pub workers: usize,
    /// Stop segmentation training early once val mIoU reaches this.
    pub seg_stop_miou: Option<f64>,
}

impl TrainConfig {
    /// Segmentation recipe: SGD, lr 1e-3, batch 8, 100 epochs, no decay.
    pub fn seg_default() -> Self {
        TrainConfig {
            task: Task::Seg,
            epochs: 100,
            batch_size: 8,
            base_lr: 1e-3,
            weight_decay: 0.0,
            optimizer: OptimizerKind::Sgd,
            milestones: (0.30, 0.80),
            momentum: 0.9,
            seed: 0,
            temperature: 0.1,
            mixup_alpha: 0.2,
            use_contrastive: false,
            use_mixup: false,
            adaptive_weights: false,
            grad_clip: None,
            workers: 2,
            seg_stop_miou: None,
        }
    }

    /// Classification recipe: Adam, lr 1e-4, batch 4, weight decay 1e-5.
    pub fn clf_default() -> Self {
        TrainConfig {
            task: Task::Clf,
            epochs: 100,
            batch_size: 4,
            base_lr: 1e-4,
            weight_decay: 1e-5,
            optimizer: OptimizerKind::Adam,
            milestones: (0.30, 0.80),
            momentum: 0.9,
            seed: 0,
            temperature: 0.1,
            mixup_alpha: 0.2,
            use_contrastive: true,
            use_mixup: true,
            adaptive_weights: true,
            grad_clip: None,
            workers: 2,
            seg_stop_miou: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::validation("epochs and batch_size must be positive"));
        }
        if !(self.milestones.0 > 0.0
            && self.milestones.0 < self.milestones.1
            && self.milestones.1 < 1.0)
        {
            return Err(Error::validation(format!(
                "milestones {:?} must be strictly increasing in (0,1)",
                self.milestones
            )));
        }
        if self.workers == 0 {
            return Err(Error::validation("workers must be >= 1"));
        }
        Ok(())
    }
}

/// Step learning-rate schedule: divided by 10 at each milestone fraction of
/// the total epochs.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::validation(format!(
            "epoch {epoch} out of range for {} total epochs",
            cfg.epochs
        )));
    }
    let m1 = (cfg.milestones.0 * cfg.epochs as f64).floor() as usize;
    let m2 = (cfg.milestones.1 * cfg.epochs as f64).floor() as usize;
    Ok(if epoch < m1 {
        cfg.base_lr
    } else if epoch < m2 {
        cfg.base_lr / 10.0
    } else {
        cfg.base_lr / 100.0
    })
}

/// Per-epoch log record, written as line-delimited JSON during training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_metric: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma2: Option<f64>,
}

/// Run `f` over `0..n` split into `workers` contiguous chunks, writing
/// results in index order. Chunk boundaries depend only on (n, workers), so
/// any thread interleaving produces identical output.
pub(crate) fn run_chunked<T: Send, F: Fn(usize) -> T + Sync>(
    n: usize,
    workers: usize,
    f: F,
) -> Vec<T> {
    let mut out: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(workers.max(1));
    let mut slices: Vec<&mut [Option<T>]> = Vec::new();
    let mut rest = out.as_mut_slice();
    while !rest.is_empty() {
        let take = chunk.min(rest.len());
        let (head, tail) = rest.split_at_mut(take);
        slices.push(head);
        rest = tail;
    }
    rayon::scope(|s| {
        for (ci, sl) in slices.into_iter().enumerate() {
            let f = &f;
            s.spawn(move |_| {
                for (j, cell) in sl.iter_mut().enumerate() {
                    *cell = Some(f(ci * chunk + j));
                }
            });
        }
    });
    out.into_iter().map(|v| v.expect("chunk fully populated")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_lr(got: f64, want: f64) {
        assert!((got - want).abs() <= 1e-12 * want, "{got} vs {want}");
    }

    #[test]
    fn lr_schedule_matches_recipe() {
        let clf = TrainConfig::clf_default();
        assert_lr(lr_schedule(0, &clf).unwrap(), 1e-4);
        assert_lr(lr_schedule(29, &clf).unwrap(), 1e-4);
        assert_lr(lr_schedule(30, &clf).unwrap(), 1e-5);
        assert_lr(lr_schedule(79, &clf).unwrap(), 1e-5);
        assert_lr(lr_schedule(80, &clf).unwrap(), 1e-6);
        assert_lr(lr_schedule(99, &clf).unwrap(), 1e-6);
        let seg = TrainConfig::seg_default();
        assert_lr(lr_schedule(29, &seg).unwrap(), 1e-3);
        assert_lr(lr_schedule(30, &seg).unwrap(), 1e-4);
        assert_lr(lr_schedule(80, &seg).unwrap(), 1e-5);
        assert!(lr_schedule(100, &seg).is_err());
    }

    #[test]
    fn default_recipes_carry_reference_hyperparameters() {
        let seg = TrainConfig::seg_default();
        assert_eq!(seg.batch_size, 8);
        assert_eq!(seg.base_lr, 1e-3);
        assert_eq!(seg.optimizer, OptimizerKind::Sgd);
        assert_eq!(seg.weight_decay, 0.0);
        assert_eq!(seg.epochs, 100);
        let clf = TrainConfig::clf_default();
        assert_eq!(clf.batch_size, 4);
        assert_eq!(clf.base_lr, 1e-4);
        assert_eq!(clf.optimizer, OptimizerKind::Adam);
        assert_eq!(clf.weight_decay, 1e-5);
        assert_eq!(clf.milestones, (0.30, 0.80));
    }

    #[test]
    fn invalid_milestones_rejected() {
        let mut cfg = TrainConfig::clf_default();
        cfg.milestones = (0.8, 0.3);
        assert!(cfg.validate().is_err());
        cfg.milestones = (0.0, 0.8);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn run_chunked_preserves_order_for_any_worker_count() {
        let want: Vec<usize> = (0..37).map(|i| i * i).collect();
        for workers in 1..5 {
            let got = run_chunked(37, workers, |i| i * i);
            assert_eq!(got, want);
        }
    }
}
