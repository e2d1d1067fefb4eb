use std::f64::consts::PI;

use super::layout::Layout;
use super::scalar::Scalar;
use super::TrainConfig;

/// Learning rate for a zero-based step: linear warmup to `base_lr`, then
/// cosine decay reaching `min_lr_ratio * base_lr` at the final step.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    let base = cfg.base_lr;
    if step < cfg.warmup_steps {
        return base * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg
        .steps
        .saturating_sub(1)
        .saturating_sub(cfg.warmup_steps)
        .max(1);
    let progress = ((step - cfg.warmup_steps) as f64 / span as f64).min(1.0);
    let min = base * cfg.min_lr_ratio;
    min + 0.5 * (base - min) * (1.0 + (PI * progress).cos())
}

/// AdamW with decoupled weight decay on matrix-shaped tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(n: usize) -> Self {
        AdamW {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        }
    }

    pub fn step(
        &mut self,
        params: &mut [T],
        grad: &[T],
        layout: &Layout,
        cfg: &TrainConfig,
        lr: f64,
    ) {
        self.t += 1;
        let b1 = cfg.beta1;
        let b2 = cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let (b1t, b2t) = (T::from_f64(b1), T::from_f64(b2));
        let (c1, c2) = (T::from_f64(1.0 - b1), T::from_f64(1.0 - b2));
        let step = T::from_f64(lr / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let eps = T::from_f64(cfg.eps);
        for spec in &layout.tensors {
            let decay = if spec.decay {
                T::from_f64(1.0 - lr * cfg.weight_decay)
            } else {
                T::one()
            };
            for i in spec.range() {
                let g = grad[i];
                let m = b1t * self.m[i] + c1 * g;
                let v = b2t * self.v[i] + c2 * g * g;
                self.m[i] = m;
                self.v[i] = v;
                params[i] = params[i] * decay - step * m / ((v * inv_bc2).sqrt() + eps);
            }
        }
    }
}
