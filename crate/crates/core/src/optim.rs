//! Decoupled-weight-decay adaptive-moment optimizer and global-norm
//! gradient clipping. State is keyed by parameter name so it can be
//! checkpointed and restored bit-exactly.

use std::collections::BTreeMap;

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Per-parameter first/second moment buffers plus the shared step
/// counter (1-based after the first update).
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: usize,
    pub first: BTreeMap<String, Vec<f64>>,
    pub second: BTreeMap<String, Vec<f64>>,
}

pub struct Adam {
    pub hyper: AdamHyper,
    pub state: AdamState,
}

impl Adam {
    pub fn new(hyper: AdamHyper) -> Self {
        Self { hyper, state: AdamState::default() }
    }

    pub fn with_state(hyper: AdamHyper, state: AdamState) -> Self {
        Self { hyper, state }
    }

    /// Advances the shared step counter. Call once per optimization
    /// step, before the per-parameter updates.
    pub fn begin_step(&mut self) {
        self.state.step += 1;
    }

    /// Applies the update for one named parameter at the current step.
    pub fn update(&mut self, lr: f64, name: &str, param: &mut Tensor, grad: &Tensor) {
        debug_assert_eq!(param.shape(), grad.shape(), "{name} grad shape");
        debug_assert!(self.state.step > 0, "begin_step before update");
        let t = self.state.step as i32;
        let h = self.hyper;
        let bc1 = 1.0 - h.beta1.powi(t);
        let bc2 = 1.0 - h.beta2.powi(t);
        let m = self
            .state
            .first
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; param.numel()]);
        let v = self
            .state
            .second
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; param.numel()]);
        let p = param.data_mut();
        let g = grad.data();
        for i in 0..p.len() {
            m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
            v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * (m_hat / (v_hat.sqrt() + h.eps) + h.weight_decay * p[i]);
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [(String, Tensor)], max_norm: f64) -> f64 {
    let total: f64 = grads
        .iter()
        .map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let scale = max_norm / total;
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    total
}
