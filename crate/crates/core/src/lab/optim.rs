use serde::{Deserialize, Serialize};

use super::model::norm;

/// Learning rate at update `t` (1-based): linear warmup to `peak` over
/// `warmup` updates, then cosine decay to zero at `total`.
pub fn lr_at(t: u64, peak: f64, warmup: u64, total: u64) -> f64 {
    if warmup > 0 && t <= warmup {
        return peak * t as f64 / warmup as f64;
    }
    if total <= warmup {
        return 0.0;
    }
    let progress = (t.min(total) - warmup) as f64 / (total - warmup) as f64;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Rescales `grad` in place so its L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let n = norm(grad);
    if n > max_norm {
        let k = max_norm / n;
        grad.iter_mut().for_each(|g| *g *= k);
    }
    n
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    decay: Vec<bool>,
}

impl AdamW {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64, weight_decay: f64, decay: Vec<bool>) -> Self {
        assert_eq!(decay.len(), n);
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            decay,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            if self.decay[i] {
                params[i] *= 1.0 - lr * self.weight_decay;
            }
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}
