//! Loss components of the joint classification objective: supervised
//! contrastive loss, mixup loss, class-weighted cross-entropy, and the
//! adaptive (learned-weight) combination.
//!
//! All losses are computed in f64 with closed-form gradients, so they can be
//! checked directly against central finite differences.

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 4;

/// A batch of projection vectors with labels for the contrastive loss.
/// Rows are expected to be L2-normalized upstream when the conventional
/// bounded-similarity behavior is wanted; the loss itself consumes raw rows.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    /// Flat (rows, dim) projections.
    pub z: Vec<f64>,
    pub dim: usize,
    pub labels: Vec<usize>,
    pub temperature: f64,
}

impl ContrastiveBatch {
    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::validation(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if self.rows() < 2 {
            return Err(Error::validation(format!(
                "contrastive batch needs at least 2 rows, got {}",
                self.rows()
            )));
        }
        if self.z.len() != self.rows() * self.dim {
            return Err(Error::validation(format!(
                "projection buffer is {} values, expected {}x{}",
                self.z.len(),
                self.rows(),
                self.dim
            )));
        }
        Ok(())
    }
}

/// Per-anchor supervised contrastive losses. Anchors whose class has no
/// other sample in the batch contribute 0 (the prefactor is undefined
/// there).
pub fn supervised_contrastive_per_anchor(b: &ContrastiveBatch) -> Result<Vec<f64>> {
    Ok(contrastive_internal(b, None)?.0)
}

/// Mean over anchors of the per-anchor contrastive losses.
pub fn supervised_contrastive_loss(b: &ContrastiveBatch) -> Result<f64> {
    let per = supervised_contrastive_per_anchor(b)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Mean loss and its gradient w.r.t. every projection entry.
pub fn supervised_contrastive_loss_grad(b: &ContrastiveBatch) -> Result<(f64, Vec<f64>)> {
    let mut dz = vec![0.0f64; b.z.len()];
    let (per, _) = contrastive_internal(b, Some(&mut dz))?;
    let n = per.len() as f64;
    Ok((per.iter().sum::<f64>() / n, dz))
}

fn contrastive_internal(
    b: &ContrastiveBatch,
    mut grad: Option<&mut Vec<f64>>,
) -> Result<(Vec<f64>, ())> {
    b.validate()?;
    let n = b.rows();
    let tau = b.temperature;
    let zrow = |i: usize| &b.z[i * b.dim..(i + 1) * b.dim];

    // similarity matrix s_ij = <z_i, z_j> / tau
    let mut sim = vec![0.0f64; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let s = zrow(i).iter().zip(zrow(j)).map(|(a, c)| a * c).sum::<f64>() / tau;
            sim[i * n + j] = s;
            sim[j * n + i] = s;
        }
    }

    let mut per = vec![0.0f64; n];
    // d(mean loss)/d(sim_ik), accumulated anchor by anchor
    let mut dsim = if grad.is_some() { vec![0.0f64; n * n] } else { Vec::new() };
    for i in 0..n {
        let positives: Vec<usize> =
            (0..n).filter(|&j| j != i && b.labels[j] == b.labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        // log-sum-exp over all k != i
        let row = &sim[i * n..(i + 1) * n];
        let max = (0..n)
            .filter(|&k| k != i)
            .map(|k| row[k])
            .fold(f64::NEG_INFINITY, f64::max);
        let z_sum: f64 = (0..n).filter(|&k| k != i).map(|k| (row[k] - max).exp()).sum();
        let log_z = max + z_sum.ln();

        let p_count = positives.len() as f64;
        let mut loss_i = 0.0;
        for &j in &positives {
            loss_i += -(row[j] - log_z);
        }
        per[i] = loss_i / p_count;

        if grad.is_some() {
            // dL_i/ds_ik = softmax_ik - 1[k in P]/|P|, weighted by 1/n for the mean
            for k in 0..n {
                if k == i {
                    continue;
                }
                let softmax = (row[k] - max).exp() / z_sum;
                let pos_term = if b.labels[k] == b.labels[i] { 1.0 / p_count } else { 0.0 };
                dsim[i * n + k] = (softmax - pos_term) / n as f64;
            }
        }
    }

    if let Some(dz) = grad.as_mut() {
        for i in 0..n {
            for k in 0..n {
                if k == i {
                    continue;
                }
                let g = dsim[i * n + k];
                if g == 0.0 {
                    continue;
                }
                let (zi, zk) = (zrow(i), zrow(k));
                let drow_i = g / tau;
                for d in 0..b.dim {
                    dz[i * b.dim + d] += drow_i * zk[d];
                    dz[k * b.dim + d] += drow_i * zi[d];
                }
            }
        }
    }
    Ok((per, ()))
}

/// Convex combination of two samples and their (soft) labels.
pub fn mixup_pair(
    x_i: &[f32],
    y_i: &[f64; NUM_CLASSES],
    x_p: &[f32],
    y_p: &[f64; NUM_CLASSES],
    lambda: f64,
) -> Result<(Vec<f32>, [f64; NUM_CLASSES])> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::validation(format!("lambda {lambda} outside [0,1]")));
    }
    if x_i.len() != x_p.len() {
        return Err(Error::validation(format!(
            "mixup inputs differ in length: {} vs {}",
            x_i.len(),
            x_p.len()
        )));
    }
    let l = lambda as f32;
    let x_mix: Vec<f32> = x_i.iter().zip(x_p).map(|(a, b)| l * a + (1.0 - l) * b).collect();
    let mut y_mix = [0.0f64; NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        y_mix[c] = lambda * y_i[c] + (1.0 - lambda) * y_p[c];
    }
    Ok((x_mix, y_mix))
}

fn log_softmax(logits: &[f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let mut out = [0.0; NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        out[c] = logits[c] - lse;
    }
    out
}

fn softmax(logits: &[f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let ls = log_softmax(logits);
    ls.map(f64::exp)
}

/// Per-sample soft-label cross-entropy of mixed samples.
pub fn mixup_per_sample(
    logits: &[[f64; NUM_CLASSES]],
    y_mix: &[[f64; NUM_CLASSES]],
) -> Result<Vec<f64>> {
    if logits.len() != y_mix.len() {
        return Err(Error::validation(format!(
            "mixup loss shape mismatch: {} logits vs {} targets",
            logits.len(),
            y_mix.len()
        )));
    }
    let mut out = Vec::with_capacity(logits.len());
    for (lg, y) in logits.iter().zip(y_mix) {
        let sum: f64 = y.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::validation(format!("mixed label sums to {sum}, expected 1")));
        }
        let ls = log_softmax(lg);
        out.push(-(0..NUM_CLASSES).map(|c| y[c] * ls[c]).sum::<f64>());
    }
    Ok(out)
}

/// Batch-mean soft-label cross-entropy.
pub fn mixup_loss(logits: &[[f64; NUM_CLASSES]], y_mix: &[[f64; NUM_CLASSES]]) -> Result<f64> {
    let per = mixup_per_sample(logits, y_mix)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Batch-mean loss and gradient w.r.t. logits: (softmax - y)/B.
pub fn mixup_loss_grad(
    logits: &[[f64; NUM_CLASSES]],
    y_mix: &[[f64; NUM_CLASSES]],
) -> Result<(f64, Vec<[f64; NUM_CLASSES]>)> {
    let loss = mixup_loss(logits, y_mix)?;
    let b = logits.len() as f64;
    let grad = logits
        .iter()
        .zip(y_mix)
        .map(|(lg, y)| {
            let p = softmax(lg);
            let mut g = [0.0; NUM_CLASSES];
            for c in 0..NUM_CLASSES {
                g[c] = (p[c] - y[c]) / b;
            }
            g
        })
        .collect();
    Ok((loss, grad))
}

/// Per-class loss weights, inverse to class frequency, rescaled to mean 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    pub alpha: [f64; NUM_CLASSES],
}

impl ClassWeights {
    pub fn uniform() -> Self {
        ClassWeights { alpha: [1.0; NUM_CLASSES] }
    }
}

pub fn class_weights_from_counts(counts: [usize; NUM_CLASSES]) -> Result<ClassWeights> {
    if let Some(c) = counts.iter().position(|c| *c == 0) {
        return Err(Error::validation(format!("class {} has zero count", c + 1)));
    }
    let total: f64 = counts.iter().sum::<usize>() as f64;
    let mut alpha = [0.0f64; NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        alpha[c] = total / counts[c] as f64;
    }
    let mean = alpha.iter().sum::<f64>() / NUM_CLASSES as f64;
    for a in alpha.iter_mut() {
        *a /= mean;
    }
    Ok(ClassWeights { alpha })
}

/// Per-sample weighted cross-entropy `-alpha_c * log softmax(logits)_c`.
pub fn weighted_ce_per_sample(
    logits: &[[f64; NUM_CLASSES]],
    classes: &[usize],
    weights: &ClassWeights,
) -> Result<Vec<f64>> {
    if logits.len() != classes.len() {
        return Err(Error::validation(format!(
            "weighted CE shape mismatch: {} logits vs {} labels",
            logits.len(),
            classes.len()
        )));
    }
    if let Some(c) = classes.iter().find(|c| **c >= NUM_CLASSES) {
        return Err(Error::validation(format!("class index {c} out of range")));
    }
    Ok(logits
        .iter()
        .zip(classes)
        .map(|(lg, &c)| -weights.alpha[c] * log_softmax(lg)[c])
        .collect())
}

/// Batch-mean weighted cross-entropy.
pub fn weighted_ce(
    logits: &[[f64; NUM_CLASSES]],
    classes: &[usize],
    weights: &ClassWeights,
) -> Result<f64> {
    let per = weighted_ce_per_sample(logits, classes, weights)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Batch-mean loss and gradient w.r.t. logits.
pub fn weighted_ce_grad(
    logits: &[[f64; NUM_CLASSES]],
    classes: &[usize],
    weights: &ClassWeights,
) -> Result<(f64, Vec<[f64; NUM_CLASSES]>)> {
    let loss = weighted_ce(logits, classes, weights)?;
    let b = logits.len() as f64;
    let grad = logits
        .iter()
        .zip(classes)
        .map(|(lg, &cls)| {
            let p = softmax(lg);
            let a = weights.alpha[cls];
            let mut g = [0.0; NUM_CLASSES];
            for c in 0..NUM_CLASSES {
                let y = if c == cls { 1.0 } else { 0.0 };
                g[c] = a * (p[c] - y) / b;
            }
            g
        })
        .collect();
    Ok((loss, grad))
}

/// Learnable loss-balancing weights, stored as log sigma so sigma stays
/// positive under unconstrained optimization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveWeights {
    pub log_sigma1: f64,
    pub log_sigma2: f64,
}

impl AdaptiveWeights {
    pub fn unit() -> Self {
        AdaptiveWeights { log_sigma1: 0.0, log_sigma2: 0.0 }
    }

    pub fn from_sigmas(sigma1: f64, sigma2: f64) -> Result<Self> {
        if sigma1 <= 0.0 || sigma2 <= 0.0 {
            return Err(Error::validation(format!(
                "sigmas must be positive, got {sigma1}, {sigma2}"
            )));
        }
        Ok(AdaptiveWeights { log_sigma1: sigma1.ln(), log_sigma2: sigma2.ln() })
    }

    pub fn sigma1(&self) -> f64 {
        self.log_sigma1.exp()
    }

    pub fn sigma2(&self) -> f64 {
        self.log_sigma2.exp()
    }
}

/// Joint objective: `mean(L_con)/sigma1^2 + mean(L_mix + L_clf)/sigma2^2 +
/// log sigma1 + log sigma2`.
pub fn adaptive_joint_loss(
    l_con: &[f64],
    l_mix: &[f64],
    l_clf: &[f64],
    w: &AdaptiveWeights,
) -> Result<f64> {
    let (v, _, _) = adaptive_joint_loss_grad(l_con, l_mix, l_clf, w)?;
    Ok(v)
}

/// Joint loss, gradient w.r.t. (log sigma1, log sigma2), and the per-branch
/// coefficients (1/sigma1^2, 1/sigma2^2) needed to scale upstream gradients.
pub fn adaptive_joint_loss_grad(
    l_con: &[f64],
    l_mix: &[f64],
    l_clf: &[f64],
    w: &AdaptiveWeights,
) -> Result<(f64, [f64; 2], [f64; 2])> {
    if l_con.len() != l_mix.len() || l_mix.len() != l_clf.len() || l_con.is_empty() {
        return Err(Error::validation(format!(
            "per-sample loss vectors must agree in length: {} / {} / {}",
            l_con.len(),
            l_mix.len(),
            l_clf.len()
        )));
    }
    let n = l_con.len() as f64;
    let mean_con = l_con.iter().sum::<f64>() / n;
    let mean_sup = l_mix.iter().zip(l_clf).map(|(a, b)| a + b).sum::<f64>() / n;
    let c1 = (-2.0 * w.log_sigma1).exp(); // 1/sigma1^2
    let c2 = (-2.0 * w.log_sigma2).exp();
    let loss = c1 * mean_con + c2 * mean_sup + w.log_sigma1 + w.log_sigma2;
    // d/d(log sigma) of e^{-2u} * a + u  ==  -2 e^{-2u} a + 1
    let grad = [-2.0 * c1 * mean_con + 1.0, -2.0 * c2 * mean_sup + 1.0];
    Ok((loss, grad, [c1, c2]))
}
