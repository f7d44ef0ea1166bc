//! AdamW and the cosine-annealing-with-warm-restarts schedule.

use std::f64::consts::PI;

use super::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-3 }
    }
}

/// First/second moment buffers, one pair per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamWState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamWState {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected AdamW update with decoupled weight decay:
/// `w ← w − lr·m̂/(√v̂ + eps) − lr·wd·w`.
///
/// A `None` gradient is treated as zero.
pub fn adamw_step(params: &mut [Tensor], grads: &[Option<&[f64]>], state: &mut AdamWState, cfg: &AdamWConfig) {
    assert_eq!(params.len(), grads.len(), "one gradient slot per parameter");
    assert_eq!(params.len(), state.m.len(), "optimizer state does not match parameters");
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        assert_eq!(m.len(), p.numel());
        let g = grads[i];
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g.map_or(0.0, |g| g[j]);
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            if cfg.lr != 0.0 {
                *w = *w - cfg.lr * mhat / (vhat.sqrt() + cfg.eps) - cfg.lr * cfg.weight_decay * *w;
            }
        }
    }
}

/// Learning rate at `epoch` for cosine annealing with warm restarts.
///
/// Cycle `i` spans `t0·t_mult^i` epochs; the rate restarts at `lr_max` at
/// the first epoch of every cycle.
pub fn cosine_warm_restart_lr(epoch: usize, lr_max: f64, lr_min: f64, t0: usize, t_mult: usize) -> f64 {
    assert!(t0 >= 1 && t_mult >= 1, "t0 and t_mult must be positive");
    let mut offset = epoch;
    let mut cycle = t0;
    while offset >= cycle {
        offset -= cycle;
        cycle *= t_mult;
    }
    if offset == 0 {
        return lr_max;
    }
    lr_min + (lr_max - lr_min) * (1.0 + (PI * offset as f64 / cycle as f64).cos()) / 2.0
}
