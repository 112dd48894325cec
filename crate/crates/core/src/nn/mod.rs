//! Minimal CPU neural-network kernels: a flat parameter arena, layers with
//! explicit forward/backward passes, and SGD/Adam optimizers.
//!
//! Layers are descriptors holding ranges into a shared parameter arena;
//! forward/backward take the parameter slice explicitly, so inference is
//! read-only and thread-safe, and gradient buffers can be per-worker.

pub mod layers;
pub mod optim;

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Range into a parameter arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub off: usize,
    pub len: usize,
}

impl Slot {
    pub fn of<'a>(&self, arena: &'a [f32]) -> &'a [f32] {
        &arena[self.off..self.off + self.len]
    }

    pub fn of_mut<'a>(&self, arena: &'a mut [f32]) -> &'a mut [f32] {
        &mut arena[self.off..self.off + self.len]
    }
}

/// Allocates slots while a model is being described.
#[derive(Debug, Default)]
pub struct ParamAlloc {
    len: usize,
}

impl ParamAlloc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, len: usize) -> Slot {
        let slot = Slot { off: self.len, len };
        self.len += len;
        slot
    }

    pub fn total(&self) -> usize {
        self.len
    }
}

/// Fill `slot` with N(0, std) samples.
pub fn init_normal(params: &mut [f32], slot: Slot, std: f32, rng: &mut impl Rng) {
    let dist = Normal::new(0.0f32, std).expect("std must be finite");
    for v in slot.of_mut(params) {
        *v = dist.sample(rng);
    }
}

pub fn init_const(params: &mut [f32], slot: Slot, value: f32) {
    for v in slot.of_mut(params) {
        *v = value;
    }
}

/// Global L2-norm gradient clip; returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [f32], max_norm: f32) -> f32 {
    let norm = grads.iter().map(|g| (*g as f64) * (*g as f64)).sum::<f64>().sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= scale;
        }
    }
    norm
}
