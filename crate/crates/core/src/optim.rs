//! AdamW with decoupled weight decay over any [`ParamSet`].

use serde::{Deserialize, Serialize};

/// A fixed, ordered collection of trainable tensors.
pub trait ParamSet {
    /// Tensors in declaration order.
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;
    fn tensor_names(&self) -> Vec<String>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.001,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn for_params<P: ParamSet>(params: &P) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One AdamW update:
/// `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`,
/// `theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta`.
pub fn adamw_step<P: ParamSet>(params: &mut P, grads: &P, state: &mut AdamWState, cfg: &AdamWConfig) {
    if state.m.is_empty() {
        *state = AdamWState::for_params(params);
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let grads = grads.tensors();
    for (k, theta) in params.tensors_mut().into_iter().enumerate() {
        let g = grads[k];
        assert_eq!(g.len(), theta.len(), "gradient shape mismatch in tensor {k}");
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for i in 0..theta.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            let decay = cfg.learning_rate * cfg.weight_decay * theta[i];
            theta[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps) + decay;
        }
    }
}
