//! First-order optimizers over flat parameter vectors.
//!
//! Every trainable object in this crate can flatten its parameters to a
//! `Vec<f64>` in a fixed order and scatter them back, so one Adam and one
//! Nesterov implementation serve the lifter, the supernet, the controller
//! and the final recognizer alike.

use serde::{Deserialize, Serialize};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam state: first/second moment buffers and a step counter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }

    /// One Adam update with bias correction, in place on `params`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), grads.len(), "param/grad length mismatch");
        assert_eq!(params.len(), self.m.len(), "param/state length mismatch");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Nesterov momentum state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NesterovState {
    pub velocity: Vec<f64>,
    pub momentum: f64,
}

impl NesterovState {
    pub fn new(len: usize, momentum: f64) -> Self {
        Self {
            velocity: vec![0.0; len],
            momentum,
        }
    }

    /// Nesterov update: v <- mu*v + g; w <- w - lr*(g + mu*v).
    /// With momentum zero this is plain SGD, w <- w - lr*g.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), grads.len(), "param/grad length mismatch");
        assert_eq!(params.len(), self.velocity.len(), "param/state length mismatch");
        let mu = self.momentum;
        for i in 0..params.len() {
            let g = grads[i];
            self.velocity[i] = mu * self.velocity[i] + g;
            params[i] -= lr * (g + mu * self.velocity[i]);
        }
    }
}

/// Scale `grads` so its global L2 norm is at most `max_norm`. Returns the
/// pre-clip norm.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= scale;
        }
    }
    norm
}
