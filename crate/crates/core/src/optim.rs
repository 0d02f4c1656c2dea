//! First-order adaptive-moment optimizer with a cosine step-size schedule.
//!
//! For gradient `g` at update `t` (1-based):
//!
//! ```text
//! m <- b1 * m + (1 - b1) * g
//! v <- b2 * v + (1 - b2) * g^2
//! p <- p - lr_t * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
//! ```
//!
//! with `b1 = 0.9`, `b2 = 0.999`, `eps = 1e-8`.

use crate::tensor::Real;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F: Real = f32> {
    pub m: Vec<F>,
    pub v: Vec<F>,
    pub t: u64,
}

impl<F: Real> Adam<F> {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![F::zero(); n],
            v: vec![F::zero(); n],
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut [F], grads: &[F], lr: f64) {
        self.t += 1;
        let b1 = F::lit(BETA1);
        let b2 = F::lit(BETA2);
        let one = F::one();
        let c1 = F::lit(1.0 - BETA1.powi(self.t as i32));
        let c2 = F::lit(1.0 - BETA2.powi(self.t as i32));
        let lr = F::lit(lr);
        let eps = F::lit(EPS);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

/// Cosine decay from `base` at step 0 to zero at `total`, after an optional
/// linear warmup.
pub fn cosine_lr(base: f64, step: u64, total: u64, warmup: u64) -> f64 {
    if warmup > 0 && step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    if total <= warmup {
        return base;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
