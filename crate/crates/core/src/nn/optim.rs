//! SGD with momentum and Adam. Both apply classic L2 weight decay by adding
//! `wd * p` to the gradient, so an `lr = 0` step leaves parameters
//! bit-identical.

#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f32,
    velocity: Vec<f32>,
}

impl Sgd {
    pub fn new(n_params: usize, momentum: f32) -> Self {
        Sgd { momentum, velocity: vec![0.0; n_params] }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f32, weight_decay: f32) {
        for i in 0..params.len() {
            let g = grads[i] + weight_decay * params[i];
            self.velocity[i] = self.momentum * self.velocity[i] + g;
            params[i] -= lr * self.velocity[i];
        }
    }

    pub fn state(&self) -> &[f32] {
        &self.velocity
    }

    pub fn load_state(&mut self, state: &[f32]) {
        self.velocity.copy_from_slice(state);
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: u64,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; n_params], v: vec![0.0; n_params] }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f32, weight_decay: f32) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i] + weight_decay * params[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }

    /// Serialized as [t as f32, m..., v...].
    pub fn state(&self) -> Vec<f32> {
        let mut s = Vec::with_capacity(1 + 2 * self.m.len());
        s.push(self.t as f32);
        s.extend_from_slice(&self.m);
        s.extend_from_slice(&self.v);
        s
    }

    pub fn load_state(&mut self, state: &[f32]) {
        let n = self.m.len();
        assert_eq!(state.len(), 1 + 2 * n, "optimizer state length mismatch");
        self.t = state[0] as u64;
        self.m.copy_from_slice(&state[1..1 + n]);
        self.v.copy_from_slice(&state[1 + n..]);
    }
}
