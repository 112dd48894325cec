//! U-shaped encoder-decoder for slice segmentation.
//!
//! 2D slices ride through the 3D kernels with depth 1 and (1,3,3) kernels.
//! Levels double the width, max-pool between levels; the decoder upsamples,
//! reduces channels 1x1, concatenates the skip and applies a double conv.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::layers::{
    relu, relu_backward, sigmoid, sigmoid_backward, Conv3d, GroupNorm, MaxPool3d, UpsampleNearest,
};
use crate::nn::ParamAlloc;
use crate::rng;
use crate::segmentation::SliceSegmenter;
use crate::volumes::Dims3;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SegConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub levels: usize,
    pub norm_groups: usize,
    pub seed: u64,
}

impl Default for SegConfig {
    fn default() -> Self {
        SegConfig { in_channels: 1, base_width: 16, levels: 4, norm_groups: 8, seed: 0 }
    }
}

impl SegConfig {
    fn widths(&self) -> Vec<usize> {
        (0..self.levels).map(|i| self.base_width << i).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::validation("unet needs at least 2 levels".to_string()));
        }
        for w in self.widths() {
            if w % self.norm_groups != 0 {
                return Err(Error::validation(format!(
                    "width {w} not divisible by norm groups {}",
                    self.norm_groups
                )));
            }
        }
        Ok(())
    }
}

struct DoubleConv {
    conv1: Conv3d,
    gn1: GroupNorm,
    conv2: Conv3d,
    gn2: GroupNorm,
}

struct DcTrace {
    x: Vec<f32>,
    y1: Vec<f32>,
    r1: Vec<f32>,
    y2: Vec<f32>,
    out: Vec<f32>,
}

impl DoubleConv {
    fn new(alloc: &mut ParamAlloc, c_in: usize, c_out: usize, groups: usize) -> Self {
        DoubleConv {
            conv1: Conv3d::new(alloc, c_in, c_out, (1, 3, 3), (1, 1, 1), (0, 1, 1)),
            gn1: GroupNorm::new(alloc, c_out, groups),
            conv2: Conv3d::new(alloc, c_out, c_out, (1, 3, 3), (1, 1, 1), (0, 1, 1)),
            gn2: GroupNorm::new(alloc, c_out, groups),
        }
    }

    fn init(&self, params: &mut [f32], rng: &mut impl Rng) {
        self.conv1.init(params, rng);
        self.gn1.init(params);
        self.conv2.init(params, rng);
        self.gn2.init(params);
    }

    fn forward(&self, params: &[f32], x: Vec<f32>, din: Dims3) -> DcTrace {
        let spatial = din.0 * din.1 * din.2;
        let (y1, _) = self.conv1.forward(params, &x, din);
        let r1 = relu(&self.gn1.forward(params, &y1, spatial));
        let (y2, _) = self.conv2.forward(params, &r1, din);
        let out = relu(&self.gn2.forward(params, &y2, spatial));
        DcTrace { x, y1, r1, y2, out }
    }

    fn backward(
        &self,
        params: &[f32],
        tr: &DcTrace,
        din: Dims3,
        dout: &[f32],
        gparams: &mut [f32],
    ) -> Vec<f32> {
        let spatial = din.0 * din.1 * din.2;
        let dg2 = relu_backward(&tr.out, dout);
        let dy2 = self.gn2.backward(params, &tr.y2, spatial, &dg2, gparams);
        let dr1 = self.conv2.backward(params, &tr.r1, din, &dy2, gparams);
        let dg1 = relu_backward(&tr.r1, &dr1);
        let dy1 = self.gn1.backward(params, &tr.y1, spatial, &dg1, gparams);
        self.conv1.backward(params, &tr.x, din, &dy1, gparams)
    }
}

pub struct UNet2d {
    pub cfg: SegConfig,
    enc: Vec<DoubleConv>,
    dec_reduce: Vec<Conv3d>,
    dec: Vec<DoubleConv>,
    head: Conv3d,
    pool: MaxPool3d,
    up: UpsampleNearest,
    pub params: Vec<f32>,
}

pub struct UNetTrace {
    enc: Vec<DcTrace>,
    upsampled: Vec<Vec<f32>>,
    dec: Vec<DcTrace>,
    pub probs: Vec<f32>,
}

impl UNet2d {
    pub fn new(cfg: SegConfig) -> Result<Self> {
        cfg.validate()?;
        let widths = cfg.widths();
        let mut alloc = ParamAlloc::new();
        let mut enc = Vec::new();
        for (i, &w) in widths.iter().enumerate() {
            let c_in = if i == 0 { cfg.in_channels } else { widths[i - 1] };
            enc.push(DoubleConv::new(&mut alloc, c_in, w, cfg.norm_groups));
        }
        let mut dec_reduce = Vec::new();
        let mut dec = Vec::new();
        for i in (0..cfg.levels - 1).rev() {
            dec_reduce.push(Conv3d::new(
                &mut alloc,
                widths[i + 1],
                widths[i],
                (1, 1, 1),
                (1, 1, 1),
                (0, 0, 0),
            ));
            dec.push(DoubleConv::new(&mut alloc, 2 * widths[i], widths[i], cfg.norm_groups));
        }
        let head = Conv3d::new(&mut alloc, widths[0], 1, (1, 1, 1), (1, 1, 1), (0, 0, 0));

        let mut params = vec![0.0f32; alloc.total()];
        let mut r = rng::stream(cfg.seed, "unet-init", 0);
        for block in &enc {
            block.init(&mut params, &mut r);
        }
        for (reduce, block) in dec_reduce.iter().zip(&dec) {
            reduce.init(&mut params, &mut r);
            block.init(&mut params, &mut r);
        }
        head.init(&mut params, &mut r);

        Ok(UNet2d {
            cfg,
            enc,
            dec_reduce,
            dec,
            head,
            pool: MaxPool3d { kernel: (1, 2, 2), stride: (1, 2, 2) },
            up: UpsampleNearest { factor: (1, 2, 2) },
            params,
        })
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn check_input(&self, len: usize, h: usize, w: usize) -> Result<()> {
        let div = 1usize << (self.cfg.levels - 1);
        if h % div != 0 || w % div != 0 {
            return Err(Error::validation(format!(
                "slice {h}x{w} not divisible by {div} (levels = {})",
                self.cfg.levels
            )));
        }
        if len != self.cfg.in_channels * h * w {
            return Err(Error::validation(format!(
                "slice buffer {len} does not match {}x{h}x{w}",
                self.cfg.in_channels
            )));
        }
        Ok(())
    }

    /// Forward pass keeping every intermediate needed for backprop.
    pub fn forward_trace(&self, params: &[f32], x: &[f32], h: usize, w: usize) -> UNetTrace {
        let levels = self.cfg.levels;
        let mut enc_traces: Vec<DcTrace> = Vec::with_capacity(levels);
        let mut cur = x.to_vec();
        for (i, block) in self.enc.iter().enumerate() {
            let din = self.level_dims(h, w, i);
            if i > 0 {
                let (p, _) =
                    self.pool.forward(&cur, self.cfg.widths()[i - 1], self.level_dims(h, w, i - 1));
                cur = p;
            }
            let tr = block.forward(params, cur, din);
            cur = tr.out.clone();
            enc_traces.push(tr);
        }

        let mut upsampled = Vec::new();
        let mut dec_traces = Vec::new();
        let widths = self.cfg.widths();
        for (d, i) in (0..levels - 1).rev().enumerate() {
            let din_lo = self.level_dims(h, w, i + 1);
            let din_hi = self.level_dims(h, w, i);
            let (u, _) = self.up.forward(&cur, widths[i + 1], din_lo);
            let (r, _) = self.dec_reduce[d].forward(params, &u, din_hi);
            let mut c = enc_traces[i].out.clone();
            c.extend_from_slice(&r);
            let tr = self.dec[d].forward(params, c, din_hi);
            cur = tr.out.clone();
            upsampled.push(u);
            dec_traces.push(tr);
        }

        let (logits, _) = self.head.forward(params, &cur, self.level_dims(h, w, 0));
        let probs = sigmoid(&logits);
        UNetTrace { enc: enc_traces, upsampled, dec: dec_traces, probs }
    }

    /// Backprop from d(loss)/d(probs); accumulates into `gparams`.
    pub fn backward(
        &self,
        params: &[f32],
        tr: &UNetTrace,
        h: usize,
        w: usize,
        dprobs: &[f32],
        gparams: &mut [f32],
    ) {
        let levels = self.cfg.levels;
        let widths = self.cfg.widths();
        let dlogits = sigmoid_backward(&tr.probs, dprobs);
        let mut cur = self.head.backward(
            params,
            &tr.dec.last().unwrap().out,
            self.level_dims(h, w, 0),
            &dlogits,
            gparams,
        );

        // decoder in reverse: dec index d corresponds to level i = levels-2-d
        let mut denc_extra: Vec<Option<Vec<f32>>> = vec![None; levels];
        for d in (0..levels - 1).rev() {
            let i = levels - 2 - d;
            let din_hi = self.level_dims(h, w, i);
            let din_lo = self.level_dims(h, w, i + 1);
            let dcat = self.dec[d].backward(params, &tr.dec[d], din_hi, &cur, gparams);
            let skip_len = widths[i] * din_hi.0 * din_hi.1 * din_hi.2;
            let (dskip, dreduced) = dcat.split_at(skip_len);
            denc_extra[i] = Some(dskip.to_vec());
            let du = self.dec_reduce[d].backward(
                params,
                &tr.upsampled[d],
                din_hi,
                dreduced,
                gparams,
            );
            cur = self.up.backward(widths[i + 1], din_lo, &du);
        }

        // encoder in reverse
        for i in (0..levels).rev() {
            let din = self.level_dims(h, w, i);
            if let Some(extra) = &denc_extra[i] {
                for (a, b) in cur.iter_mut().zip(extra) {
                    *a += b;
                }
            }
            let dx = self.enc[i].backward(params, &tr.enc[i], din, &cur, gparams);
            if i > 0 {
                // pool input was the previous encoder block's output
                cur = self.pool.backward(
                    &tr.enc[i - 1].out,
                    widths[i - 1],
                    self.level_dims(h, w, i - 1),
                    &dx,
                );
            } else {
                cur = dx;
            }
        }
    }

    fn level_dims(&self, h: usize, w: usize, level: usize) -> Dims3 {
        (1, h >> level, w >> level)
    }

    pub fn predict_with(&self, params: &[f32], slice: &[f32], h: usize, w: usize) -> Result<Vec<f32>> {
        self.check_input(slice.len(), h, w)?;
        Ok(self.forward_trace(params, slice, h, w).probs)
    }
}

impl SliceSegmenter for UNet2d {
    fn predict_slice(&self, slice: &[f32], h: usize, w: usize) -> Vec<f32> {
        self.predict_with(&self.params, slice, h, w)
            .expect("slice incompatible with model config")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::dice_loss_grad;


    fn tiny_cfg() -> SegConfig {
        SegConfig { in_channels: 1, base_width: 4, levels: 3, norm_groups: 2, seed: 5 }
    }

    #[test]
    fn output_shape_matches_input_and_probs_in_range() {
        let net = UNet2d::new(tiny_cfg()).unwrap();
        let (h, w) = (16, 24);
        let x: Vec<f32> = (0..h * w).map(|i| (i % 7) as f32 / 7.0).collect();
        let probs = net.predict_slice(&x, h, w);
        assert_eq!(probs.len(), h * w);
        assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn same_seed_same_params() {
        let a = UNet2d::new(tiny_cfg()).unwrap();
        let b = UNet2d::new(tiny_cfg()).unwrap();
        assert_eq!(a.params, b.params);
        let c = UNet2d::new(SegConfig { seed: 6, ..tiny_cfg() }).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn rejects_indivisible_input() {
        let net = UNet2d::new(tiny_cfg()).unwrap();
        assert!(net.predict_with(&net.params, &vec![0.0; 15 * 16], 15, 16).is_err());
    }

    #[test]
    fn full_network_gradient_matches_finite_differences() {
        // end-to-end FD through dice loss on a tiny net
        let net = UNet2d::new(SegConfig {
            in_channels: 1,
            base_width: 2,
            levels: 2,
            norm_groups: 1,
            seed: 9,
        })
        .unwrap();
        let (h, w) = (4, 4);
        let mut r = crate::rng::stream(17, "unet-fd", 0);
        let x: Vec<f32> = (0..h * w).map(|_| r.gen_range(0.0..1.0f32)).collect();
        let t: Vec<f64> = (0..h * w).map(|_| f64::from(r.gen_bool(0.5))).collect();

        let loss_of = |params: &[f32]| -> f64 {
            let probs = net.forward_trace(params, &x, h, w).probs;
            let p64: Vec<f64> = probs.iter().map(|v| *v as f64).collect();
            crate::segmentation::dice_loss(&p64, &t, 1, 1e-6).unwrap()
        };

        let tr = net.forward_trace(&net.params, &x, h, w);
        let p64: Vec<f64> = tr.probs.iter().map(|v| *v as f64).collect();
        let (_, dprobs64) = dice_loss_grad(&p64, &t, 1, 1e-6).unwrap();
        let dprobs: Vec<f32> = dprobs64.iter().map(|v| *v as f32).collect();
        let mut grads = vec![0.0f32; net.n_params()];
        net.backward(&net.params, &tr, h, w, &dprobs, &mut grads);

        let eps = 1e-2f32;
        let mut checked = 0;
        for i in (0..net.n_params()).step_by(net.n_params() / 40 + 1) {
            let mut pp = net.params.clone();
            pp[i] += eps;
            let mut pm = net.params.clone();
            pm[i] -= eps;
            let num = (loss_of(&pp) - loss_of(&pm)) / (2.0 * eps as f64);
            let ana = grads[i] as f64;
            let tol = 2e-2 * num.abs().max(ana.abs()).max(1e-2);
            assert!((num - ana).abs() < tol, "param {i}: numeric {num} vs analytic {ana}");
            checked += 1;
        }
        assert!(checked >= 30);
    }
}
