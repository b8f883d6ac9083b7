//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore};
use crate::error::{CstsError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { betas: [0.9, 0.999], eps: 1e-8, weight_decay: 0.05 }
    }
}

/// First and second moments, one tensor per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }
}

/// `lr * 0.5 * (1 + cos(pi * step / total))`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let p = step.min(total) as f64 / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

/// One AdamW update. Parameters without a gradient see a zero gradient
/// (their moments still decay and weight decay still applies).
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &[(ParamId, Tensor)],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if state.m.len() != store.len() || state.v.len() != store.len() {
        return Err(CstsError::State(format!(
            "optimizer holds {} moments for {} parameters",
            state.m.len(),
            store.len()
        )));
    }
    let mut by_index: Vec<Option<&Tensor>> = vec![None; store.len()];
    for (id, g) in grads {
        by_index[id.index()] = Some(g);
    }
    state.step += 1;
    let [b1, b2] = cfg.betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let i = id.index();
        let p = store.get_mut(id);
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let g = by_index[i].map(Tensor::data);
        if g.is_some_and(|g| g.len() != m.len()) {
            return Err(CstsError::State(format!("gradient for parameter {i} has the wrong size")));
        }
        for (k, w) in p.data_mut().iter_mut().enumerate() {
            let gk = g.map_or(0.0, |g| g[k]);
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            let update = (m[k] / c1) / ((v[k] / c2).sqrt() + cfg.eps);
            *w -= lr * (update + cfg.weight_decay * *w);
        }
    }
    Ok(())
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [(ParamId, Tensor)], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(v));
        (s, id)
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let (mut s, id) = scalar_store(0.7);
        let mut st = AdamState::new(&s);
        let cfg = AdamConfig { weight_decay: 0.0, ..Default::default() };
        for _ in 0..5 {
            adamw_step(&mut s, &[(id, Tensor::scalar(0.0))], &mut st, 0.1, &cfg).unwrap();
        }
        assert_eq!(s.get(id).item(), 0.7);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut s, id) = scalar_store(1.0);
        let mut st = AdamState::new(&s);
        let cfg = AdamConfig { weight_decay: 0.0, ..Default::default() };
        adamw_step(&mut s, &[(id, Tensor::scalar(1.0))], &mut st, 0.1, &cfg).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps)
        assert!((s.get(id).item() - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn decay_is_decoupled() {
        let (mut s, id) = scalar_store(2.0);
        let mut st = AdamState::new(&s);
        adamw_step(&mut s, &[], &mut st, 0.1, &AdamConfig::default()).unwrap();
        assert!((s.get(id).item() - 2.0 * (1.0 - 0.1 * 0.05)).abs() < 1e-15);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1e-4, 0, 100), 1e-4);
        assert!((cosine_lr(1e-4, 50, 100) - 5e-5).abs() < 1e-18);
        assert!(cosine_lr(1e-4, 100, 100).abs() < 1e-20);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let (s, id) = scalar_store(0.0);
        let _ = s;
        let mut g = vec![(id, Tensor::new(&[2], vec![3.0, 4.0]).unwrap())];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].1.data()[0] - 0.6).abs() < 1e-15);
    }
}
