//! The severity classifier: a residual 3D convolutional encoder with a
//! global-average-pooled feature vector, a two-layer projection head for
//! the contrastive branch, and a single linear classification head (kept
//! linear so class activation maps stay valid).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::NUM_CLASSES;
use crate::nn::layers::{
    global_avg_pool, global_avg_pool_backward, relu, relu_backward, Conv3d, GroupNorm, Linear,
};
use crate::nn::ParamAlloc;
use crate::rng;
use crate::volumes::{resample_nearest, resample_trilinear, Dims3};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClassifierConfig {
    /// 1 = intensities only, 2 = mask channel + intensities.
    pub in_channels: usize,
    /// Stage widths; the last one is the feature dimension d_e.
    pub widths: Vec<usize>,
    /// Projection dimension d_p.
    pub d_p: usize,
    pub norm_groups: usize,
    /// Random-resized-crop scale range for augmentation.
    pub crop_scale: (f64, f64),
    /// Contrast jitter amplitude for augmentation (intensity channel only).
    pub contrast_jitter: f64,
    /// L2-normalize projection vectors before the contrastive loss.
    pub normalize_projections: bool,
    pub seed: u64,
    /// Zero padding in encoder convs. On for training; the translation
    /// covariance test uses valid convs.
    #[serde(default = "default_true")]
    pub padding: bool,
    /// Group normalization in encoder blocks.
    #[serde(default = "default_true")]
    pub norm: bool,
}

fn default_true() -> bool {
    true
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            in_channels: 2,
            widths: vec![16, 32, 64, 128, 256],
            d_p: 64,
            norm_groups: 8,
            crop_scale: (0.7, 1.0),
            contrast_jitter: 0.2,
            normalize_projections: true,
            seed: 0,
            padding: true,
            norm: true,
        }
    }
}

impl ClassifierConfig {
    pub fn d_e(&self) -> usize {
        *self.widths.last().expect("widths must be non-empty")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.in_channels == 1 || self.in_channels == 2) {
            return Err(Error::validation(format!(
                "in_channels {} must be 1 or 2",
                self.in_channels
            )));
        }
        if self.widths.len() < 2 {
            return Err(Error::validation("encoder needs at least 2 stages"));
        }
        if self.d_p > self.d_e() {
            return Err(Error::validation(format!(
                "d_p {} exceeds d_e {}",
                self.d_p,
                self.d_e()
            )));
        }
        if self.norm {
            for w in &self.widths {
                if w % self.norm_groups != 0 {
                    return Err(Error::validation(format!(
                        "width {w} not divisible by norm groups {}",
                        self.norm_groups
                    )));
                }
            }
        }
        if !(self.crop_scale.0 > 0.0
            && self.crop_scale.0 <= self.crop_scale.1
            && self.crop_scale.1 <= 1.0)
        {
            return Err(Error::validation(format!(
                "crop scale range {:?} invalid",
                self.crop_scale
            )));
        }
        Ok(())
    }
}

/// One residual downsampling stage: strided conv, conv, 1x1 strided skip.
struct ResBlock {
    conv1: Conv3d,
    gn1: Option<GroupNorm>,
    conv2: Conv3d,
    gn2: Option<GroupNorm>,
    skip: Conv3d,
}

struct ResTrace {
    x: Vec<f32>,
    din: Dims3,
    y1: Vec<f32>,
    r1: Vec<f32>,
    y2: Vec<f32>,
    out: Vec<f32>,
    dout: Dims3,
}

impl ResBlock {
    fn new(
        alloc: &mut ParamAlloc,
        c_in: usize,
        c_out: usize,
        stride: Dims3,
        cfg: &ClassifierConfig,
    ) -> Self {
        let pad = if cfg.padding { (1, 1, 1) } else { (0, 0, 0) };
        ResBlock {
            conv1: Conv3d::new(alloc, c_in, c_out, (3, 3, 3), stride, pad),
            gn1: cfg.norm.then(|| GroupNorm::new(alloc, c_out, cfg.norm_groups)),
            conv2: Conv3d::new(alloc, c_out, c_out, (3, 3, 3), (1, 1, 1), pad),
            gn2: cfg.norm.then(|| GroupNorm::new(alloc, c_out, cfg.norm_groups)),
            skip: Conv3d::new(alloc, c_in, c_out, (1, 1, 1), stride, (0, 0, 0)),
        }
    }

    fn init(&self, params: &mut [f32], rng: &mut impl Rng) {
        self.conv1.init(params, rng);
        if let Some(gn) = &self.gn1 {
            gn.init(params);
        }
        self.conv2.init(params, rng);
        if let Some(gn) = &self.gn2 {
            gn.init(params);
        }
        self.skip.init(params, rng);
    }

    fn forward(&self, params: &[f32], x: Vec<f32>, din: Dims3) -> ResTrace {
        let (y1, d1) = self.conv1.forward(params, &x, din);
        let s1 = d1.0 * d1.1 * d1.2;
        let n1 = match &self.gn1 {
            Some(gn) => gn.forward(params, &y1, s1),
            None => y1.clone(),
        };
        let r1 = relu(&n1);
        let (y2, d2) = self.conv2.forward(params, &r1, d1);
        let s2 = d2.0 * d2.1 * d2.2;
        let n2 = match &self.gn2 {
            Some(gn) => gn.forward(params, &y2, s2),
            None => y2.clone(),
        };
        let (skip_raw, dskip) = self.skip.forward(params, &x, din);
        // valid convs shrink the main path; center-crop the skip to match
        let skip_out = crop_center(&skip_raw, self.skip.c_out, dskip, d2);
        let mut out = vec![0.0f32; n2.len()];
        for i in 0..out.len() {
            out[i] = (n2[i] + skip_out[i]).max(0.0);
        }
        ResTrace { x, din, y1, r1, y2, out, dout: d2 }
    }

    fn backward(&self, params: &[f32], tr: &ResTrace, dout: &[f32], gparams: &mut [f32]) -> Vec<f32> {
        let d2 = tr.dout;
        let s2 = d2.0 * d2.1 * d2.2;
        let d1 = self.conv1.out_dims(tr.din);
        let s1 = d1.0 * d1.1 * d1.2;
        // out = relu(n2 + skip)
        let dsum = relu_backward(&tr.out, dout);
        let dn2 = dsum.clone();
        let dy2 = match &self.gn2 {
            Some(gn) => gn.backward(params, &tr.y2, s2, &dn2, gparams),
            None => dn2,
        };
        let dr1 = self.conv2.backward(params, &tr.r1, d1, &dy2, gparams);
        let dn1 = relu_backward(&tr.r1, &dr1);
        let dy1 = match &self.gn1 {
            Some(gn) => gn.backward(params, &tr.y1, s1, &dn1, gparams),
            None => dn1,
        };
        let mut dx = self.conv1.backward(params, &tr.x, tr.din, &dy1, gparams);
        // skip path
        let dskip_dims = self.skip.out_dims(tr.din);
        let dskip_raw = uncrop_center(&dsum, self.skip.c_out, dskip_dims, d2);
        let dx_skip = self.skip.backward(params, &tr.x, tr.din, &dskip_raw, gparams);
        for (a, b) in dx.iter_mut().zip(&dx_skip) {
            *a += b;
        }
        dx
    }
}

/// Center-crop `data` (channels x from-dims) to `to` dims (no-op when equal).
fn crop_center(data: &[f32], channels: usize, from: Dims3, to: Dims3) -> Vec<f32> {
    if from == to {
        return data.to_vec();
    }
    let off = ((from.0 - to.0) / 2, (from.1 - to.1) / 2, (from.2 - to.2) / 2);
    let mut out = Vec::with_capacity(channels * to.0 * to.1 * to.2);
    for c in 0..channels {
        let base = c * from.0 * from.1 * from.2;
        for z in 0..to.0 {
            for y in 0..to.1 {
                let row = base + ((z + off.0) * from.1 + (y + off.1)) * from.2 + off.2;
                out.extend_from_slice(&data[row..row + to.2]);
            }
        }
    }
    out
}

fn uncrop_center(grad: &[f32], channels: usize, from: Dims3, to: Dims3) -> Vec<f32> {
    if from == to {
        return grad.to_vec();
    }
    let off = ((from.0 - to.0) / 2, (from.1 - to.1) / 2, (from.2 - to.2) / 2);
    let mut out = vec![0.0f32; channels * from.0 * from.1 * from.2];
    for c in 0..channels {
        let base = c * from.0 * from.1 * from.2;
        let gbase = c * to.0 * to.1 * to.2;
        for z in 0..to.0 {
            for y in 0..to.1 {
                let row = base + ((z + off.0) * from.1 + (y + off.1)) * from.2 + off.2;
                let grow = gbase + (z * to.1 + y) * to.2;
                out[row..row + to.2].copy_from_slice(&grad[grow..grow + to.2]);
            }
        }
    }
    out
}

/// Feature extractor + projection head + classification head.
pub struct SeverityNet {
    pub cfg: ClassifierConfig,
    stem: Conv3d,
    stem_gn: Option<GroupNorm>,
    stages: Vec<ResBlock>,
    proj1: Linear,
    proj2: Linear,
    head: Linear,
    pub params: Vec<f32>,
}

pub struct ForwardTrace {
    stem_y: Vec<f32>,
    stem_r: Vec<f32>,
    stem_dims: Dims3,
    stages: Vec<ResTrace>,
    feat_dims: Dims3,
    /// Pooled feature vector r.
    pub features: Vec<f32>,
    proj_hidden_relu: Vec<f32>,
    proj_raw: Vec<f32>,
    /// Projection z (normalized when configured).
    pub projection: Vec<f32>,
    pub logits: Vec<f32>,
    input: Vec<f32>,
    input_dims: Dims3,
}

impl SeverityNet {
    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Named parameter groups (name, count) for the layer-shape manifest.
    pub fn manifest(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        out.push(("stem.conv".into(), self.stem.w.len + self.stem.b.len));
        if let Some(gn) = &self.stem_gn {
            out.push(("stem.norm".into(), gn.gamma.len + gn.beta.len));
        }
        for (i, st) in self.stages.iter().enumerate() {
            let mut n = st.conv1.w.len + st.conv1.b.len + st.conv2.w.len + st.conv2.b.len
                + st.skip.w.len
                + st.skip.b.len;
            if let Some(gn) = &st.gn1 {
                n += gn.gamma.len + gn.beta.len;
            }
            if let Some(gn) = &st.gn2 {
                n += gn.gamma.len + gn.beta.len;
            }
            out.push((format!("stage{}", i + 1), n));
        }
        out.push(("projection.fc1".into(), self.proj1.w.len + self.proj1.b.len));
        out.push(("projection.fc2".into(), self.proj2.w.len + self.proj2.b.len));
        out.push(("head.fc".into(), self.head.w.len + self.head.b.len));
        out
    }
}

/// Build the model with seeded initialization.
pub fn build_model(cfg: &ClassifierConfig) -> Result<SeverityNet> {
    cfg.validate()?;
    let mut alloc = ParamAlloc::new();
    let pad = if cfg.padding { (1, 1, 1) } else { (0, 0, 0) };
    let stem = Conv3d::new(&mut alloc, cfg.in_channels, cfg.widths[0], (3, 3, 3), (1, 2, 2), pad);
    let stem_gn = cfg.norm.then(|| GroupNorm::new(&mut alloc, cfg.widths[0], cfg.norm_groups));
    let mut stages = Vec::new();
    for i in 1..cfg.widths.len() {
        stages.push(ResBlock::new(&mut alloc, cfg.widths[i - 1], cfg.widths[i], (2, 2, 2), cfg));
    }
    let d_e = cfg.d_e();
    let proj1 = Linear::new(&mut alloc, d_e, d_e);
    let proj2 = Linear::new(&mut alloc, d_e, cfg.d_p);
    let head = Linear::new(&mut alloc, d_e, NUM_CLASSES);

    let mut params = vec![0.0f32; alloc.total()];
    let mut r = rng::stream(cfg.seed, "classifier-init", 0);
    stem.init(&mut params, &mut r);
    if let Some(gn) = &stem_gn {
        gn.init(&mut params);
    }
    for st in &stages {
        st.init(&mut params, &mut r);
    }
    proj1.init(&mut params, &mut r);
    proj2.init(&mut params, &mut r);
    head.init(&mut params, &mut r);

    Ok(SeverityNet { cfg: cfg.clone(), stem, stem_gn, stages, proj1, proj2, head, params })
}

impl SeverityNet {
    fn check_input(&self, x: &[f32], dims: Dims3) -> Result<()> {
        let need = self.cfg.in_channels * dims.0 * dims.1 * dims.2;
        if x.len() != need {
            return Err(Error::validation(format!(
                "input buffer {} does not match {} channels x {:?}",
                x.len(),
                self.cfg.in_channels,
                dims
            )));
        }
        Ok(())
    }

    /// Full forward pass: features r, projection z, logits.
    pub fn forward(&self, params: &[f32], x: &[f32], dims: Dims3) -> Result<ForwardTrace> {
        self.check_input(x, dims)?;
        let (stem_y, d0) = self.stem.forward(params, x, dims);
        let s0 = d0.0 * d0.1 * d0.2;
        let stem_n = match &self.stem_gn {
            Some(gn) => gn.forward(params, &stem_y, s0),
            None => stem_y.clone(),
        };
        let stem_r = relu(&stem_n);

        let mut cur = stem_r.clone();
        let mut cur_dims = d0;
        let mut stage_traces = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            let tr = st.forward(params, cur, cur_dims);
            cur = tr.out.clone();
            cur_dims = tr.dout;
            stage_traces.push(tr);
        }

        let spatial = cur_dims.0 * cur_dims.1 * cur_dims.2;
        let features = global_avg_pool(&cur, self.cfg.d_e(), spatial);

        let proj_hidden_relu = relu(&self.proj1.forward(params, &features));
        let proj_raw = self.proj2.forward(params, &proj_hidden_relu);
        let projection = if self.cfg.normalize_projections {
            l2_normalize(&proj_raw)
        } else {
            proj_raw.clone()
        };
        let logits = self.head.forward(params, &features);

        Ok(ForwardTrace {
            stem_y,
            stem_r,
            stem_dims: d0,
            stages: stage_traces,
            feat_dims: cur_dims,
            features,
            proj_hidden_relu,
            proj_raw,
            projection,
            logits,
            input: x.to_vec(),
            input_dims: dims,
        })
    }

    /// Pre-pooling feature maps (d_e, T', H', W') for CAM.
    pub fn forward_feature_maps(&self, params: &[f32], x: &[f32], dims: Dims3) -> Result<(Vec<f32>, Dims3)> {
        self.check_input(x, dims)?;
        let tr = self.forward(params, x, dims)?;
        Ok((tr.stages.last().unwrap().out.clone(), tr.feat_dims))
    }

    /// Row of head weights for one class (CAM weights).
    pub fn head_weights(&self, params: &[f32], class: usize) -> Vec<f32> {
        let d_e = self.cfg.d_e();
        self.head.w.of(params)[class * d_e..(class + 1) * d_e].to_vec()
    }

    /// Backprop from gradients on projection and logits.
    pub fn backward(
        &self,
        params: &[f32],
        tr: &ForwardTrace,
        dproj: &[f32],
        dlogits: &[f32],
        gparams: &mut [f32],
    ) {
        // head branch
        let mut dfeat = self.head.backward(params, &tr.features, dlogits, gparams);
        // projection branch
        let dproj_raw = if self.cfg.normalize_projections {
            l2_normalize_backward(&tr.proj_raw, dproj)
        } else {
            dproj.to_vec()
        };
        let dhid_relu = self.proj2.backward(params, &tr.proj_hidden_relu, &dproj_raw, gparams);
        let dhid = relu_backward(&tr.proj_hidden_relu, &dhid_relu);
        let dfeat2 = self.proj1.backward(params, &tr.features, &dhid, gparams);
        for (a, b) in dfeat.iter_mut().zip(&dfeat2) {
            *a += b;
        }

        let spatial = tr.feat_dims.0 * tr.feat_dims.1 * tr.feat_dims.2;
        let mut cur = global_avg_pool_backward(&dfeat, self.cfg.d_e(), spatial);
        for (st, st_tr) in self.stages.iter().zip(&tr.stages).rev() {
            cur = st.backward(params, st_tr, &cur, gparams);
        }
        let s0 = tr.stem_dims.0 * tr.stem_dims.1 * tr.stem_dims.2;
        let dn = relu_backward(&tr.stem_r, &cur);
        let dy = match &self.stem_gn {
            Some(gn) => gn.backward(params, &tr.stem_y, s0, &dn, gparams),
            None => dn,
        };
        self.stem.backward(params, &tr.input, tr.input_dims, &dy, gparams);
    }
}

fn l2_normalize(v: &[f32]) -> Vec<f32> {
    let norm = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt().max(1e-12) as f32;
    v.iter().map(|x| x / norm).collect()
}

/// d(x/|x|)/dx applied to upstream grad: (g - xhat * <g, xhat>) / |x|.
fn l2_normalize_backward(x: &[f32], g: &[f32]) -> Vec<f32> {
    let norm = x.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt().max(1e-12);
    let xhat: Vec<f64> = x.iter().map(|v| *v as f64 / norm).collect();
    let dot: f64 = xhat.iter().zip(g).map(|(a, b)| a * *b as f64).sum();
    xhat.iter()
        .zip(g)
        .map(|(xh, gv)| ((*gv as f64 - xh * dot) / norm) as f32)
        .collect()
}

/// Two independently augmented views of one input. Geometric transforms hit
/// every channel (mask channel via nearest so it stays binary); contrast
/// jitter only touches the intensity channel (the last one).
pub fn augment_two_views(
    x: &[f32],
    channels: usize,
    dims: Dims3,
    cfg: &ClassifierConfig,
    rng: &mut impl Rng,
) -> (Vec<f32>, Vec<f32>) {
    let a = augment_one(x, channels, dims, cfg, rng);
    let b = augment_one(x, channels, dims, cfg, rng);
    (a, b)
}

fn augment_one(
    x: &[f32],
    channels: usize,
    dims: Dims3,
    cfg: &ClassifierConfig,
    rng: &mut impl Rng,
) -> Vec<f32> {
    let (t, h, w) = dims;
    let n = t * h * w;
    debug_assert_eq!(x.len(), channels * n);

    // random resized crop: one scale for all axes, random corner
    let scale = rng.gen_range(cfg.crop_scale.0..=cfg.crop_scale.1);
    let ct = ((t as f64 * scale).round() as usize).clamp(1, t);
    let ch = ((h as f64 * scale).round() as usize).clamp(1, h);
    let cw = ((w as f64 * scale).round() as usize).clamp(1, w);
    let oz = rng.gen_range(0..=t - ct);
    let oy = rng.gen_range(0..=h - ch);
    let ox = rng.gen_range(0..=w - cw);
    let identity_crop = ct == t && ch == h && cw == w;

    let jitter = if cfg.contrast_jitter > 0.0 {
        rng.gen_range(-cfg.contrast_jitter..=cfg.contrast_jitter)
    } else {
        0.0
    };

    let mut out = Vec::with_capacity(x.len());
    for c in 0..channels {
        let chan = &x[c * n..(c + 1) * n];
        let mask_channel = channels == 2 && c == 0;
        let cropped: Vec<f32> = if identity_crop {
            chan.to_vec()
        } else {
            let mut buf = Vec::with_capacity(ct * ch * cw);
            for z in 0..ct {
                for y in 0..ch {
                    let row = ((z + oz) * h + (y + oy)) * w + ox;
                    buf.extend_from_slice(&chan[row..row + cw]);
                }
            }
            if mask_channel {
                resample_nearest(&buf, (ct, ch, cw), dims)
            } else {
                resample_trilinear(&buf, (ct, ch, cw), dims)
            }
        };
        if mask_channel || jitter == 0.0 {
            out.extend_from_slice(&cropped);
        } else {
            let mean = cropped.iter().map(|v| *v as f64).sum::<f64>() / cropped.len() as f64;
            let factor = (1.0 + jitter) as f32;
            let m = mean as f32;
            out.extend(cropped.iter().map(|v| (m + (v - m) * factor).clamp(0.0, 1.0)));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ClassifierConfig {
        ClassifierConfig {
            in_channels: 2,
            widths: vec![4, 8, 16],
            d_p: 8,
            norm_groups: 2,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn forward_shapes_match_config() {
        let cfg = tiny_cfg();
        let net = build_model(&cfg).unwrap();
        let dims = (8, 16, 16);
        let x = vec![0.3f32; 2 * 8 * 16 * 16];
        let tr = net.forward(&net.params, &x, dims).unwrap();
        assert_eq!(tr.features.len(), 16);
        assert_eq!(tr.projection.len(), 8);
        assert_eq!(tr.logits.len(), NUM_CLASSES);
    }

    #[test]
    fn channel_contract_enforced() {
        let net = build_model(&tiny_cfg()).unwrap();
        let dims = (8, 16, 16);
        // 1-channel buffer rejected by a 2-channel model
        assert!(net.forward(&net.params, &vec![0.0; 8 * 16 * 16], dims).is_err());
        let net1 = build_model(&ClassifierConfig { in_channels: 1, ..tiny_cfg() }).unwrap();
        assert!(net1.forward(&net1.params, &vec![0.0; 2 * 8 * 16 * 16], dims).is_err());
        assert!(net1.forward(&net1.params, &vec![0.0; 8 * 16 * 16], dims).is_ok());
    }

    #[test]
    fn same_seed_identical_params() {
        let a = build_model(&tiny_cfg()).unwrap();
        let b = build_model(&tiny_cfg()).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn forward_is_deterministic_in_eval() {
        let net = build_model(&tiny_cfg()).unwrap();
        let dims = (8, 16, 16);
        let x: Vec<f32> = (0..2 * 8 * 16 * 16).map(|i| ((i * 37) % 11) as f32 / 11.0).collect();
        let a = net.forward(&net.params, &x, dims).unwrap();
        let b = net.forward(&net.params, &x, dims).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.projection, b.projection);
    }

    #[test]
    fn projections_are_unit_norm_when_configured() {
        let net = build_model(&tiny_cfg()).unwrap();
        let dims = (8, 16, 16);
        let x: Vec<f32> = (0..2 * 8 * 16 * 16).map(|i| (i % 5) as f32 / 5.0).collect();
        let tr = net.forward(&net.params, &x, dims).unwrap();
        let norm: f32 = tr.projection.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-4, "norm {norm}");
    }

    #[test]
    fn plain_mode_is_same_code_path_with_one_channel() {
        let cfg = ClassifierConfig { in_channels: 1, ..tiny_cfg() };
        let net = build_model(&cfg).unwrap();
        let dims = (8, 16, 16);
        let x = vec![0.5f32; 8 * 16 * 16];
        let tr = net.forward(&net.params, &x, dims).unwrap();
        assert_eq!(tr.logits.len(), NUM_CLASSES);
    }

    #[test]
    fn translation_covariance_at_stride_granularity() {
        // valid convs, no norm: shifting the input window by the total
        // stride shifts pre-pooling features by one cell.
        let cfg = ClassifierConfig {
            in_channels: 1,
            widths: vec![4, 8],
            d_p: 4,
            norm_groups: 1,
            padding: false,
            norm: false,
            seed: 1,
            ..Default::default()
        };
        let net = build_model(&cfg).unwrap();
        // total stride: stem (1,2,2) then stage (2,2,2) -> (2,4,4)
        let big = (20usize, 32usize, 32usize);
        let mut r = crate::rng::stream(8, "cov", 0);
        use rand::Rng as _;
        let big_buf: Vec<f32> =
            (0..big.0 * big.1 * big.2).map(|_| r.gen_range(0.0..1.0f32)).collect();
        let window = (18usize, 28usize, 28usize);
        let grab = |oz: usize, oy: usize, ox: usize| -> Vec<f32> {
            let mut out = Vec::with_capacity(window.0 * window.1 * window.2);
            for z in 0..window.0 {
                for y in 0..window.1 {
                    let row = ((z + oz) * big.1 + (y + oy)) * big.2 + ox;
                    out.extend_from_slice(&big_buf[row..row + window.2]);
                }
            }
            out
        };
        let (fa, da) = net.forward_feature_maps(&net.params, &grab(0, 0, 0), window).unwrap();
        let (fb, db) = net.forward_feature_maps(&net.params, &grab(2, 4, 4), window).unwrap();
        assert_eq!(da, db);
        let (d, hh, ww) = da;
        let c = cfg.widths[1];
        // f_b[z, y, x] == f_a[z+1, y+1, x+1] on the overlap
        let mut compared = 0;
        for ch in 0..c {
            for z in 0..d - 1 {
                for y in 0..hh - 1 {
                    for x in 0..ww - 1 {
                        let a = fa[((ch * d + z + 1) * hh + y + 1) * ww + x + 1];
                        let b = fb[((ch * d + z) * hh + y) * ww + x];
                        assert!(
                            (a - b).abs() < 1e-4,
                            "ch {ch} z {z} y {y} x {x}: {a} vs {b}"
                        );
                        compared += 1;
                    }
                }
            }
        }
        assert!(compared > 0);
    }

    #[test]
    fn augment_identity_config_is_identity() {
        let cfg = ClassifierConfig {
            crop_scale: (1.0, 1.0),
            contrast_jitter: 0.0,
            ..tiny_cfg()
        };
        let dims = (4, 8, 8);
        let x: Vec<f32> = (0..2 * 4 * 8 * 8).map(|i| (i % 9) as f32 / 9.0).collect();
        let mut r = crate::rng::stream(1, "aug", 0);
        let (a, b) = augment_two_views(&x, 2, dims, &cfg, &mut r);
        assert_eq!(a, x);
        assert_eq!(b, x);
    }

    #[test]
    fn augment_keeps_mask_channel_binary_and_is_reproducible() {
        let cfg = tiny_cfg();
        let dims = (6, 12, 12);
        let n = 6 * 12 * 12;
        let mut r = crate::rng::stream(2, "aug2", 0);
        use rand::Rng as _;
        let mut x = vec![0.0f32; 2 * n];
        for i in 0..n {
            x[i] = f32::from(r.gen_bool(0.3));
            x[n + i] = r.gen_range(0.0..1.0);
        }
        let mut ra = crate::rng::stream(3, "aug3", 7);
        let (a1, a2) = augment_two_views(&x, 2, dims, &cfg, &mut ra);
        for v in &a1[..n] {
            assert!(*v == 0.0 || *v == 1.0, "mask not binary: {v}");
        }
        for v in &a2[..n] {
            assert!(*v == 0.0 || *v == 1.0);
        }
        let mut rb = crate::rng::stream(3, "aug3", 7);
        let (b1, b2) = augment_two_views(&x, 2, dims, &cfg, &mut rb);
        assert_eq!(a1, b1);
        assert_eq!(a2, b2);
        // two views generally differ
        assert_ne!(a1, a2);
    }

    #[test]
    fn manifest_counts_sum_to_param_total() {
        let net = build_model(&ClassifierConfig::default()).unwrap();
        let total: usize = net.manifest().iter().map(|(_, n)| n).sum();
        assert_eq!(total, net.n_params());
    }
}
