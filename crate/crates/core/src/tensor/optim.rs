use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::params::Parameterized;

/// Adam hyper-parameters. The defaults use a learning rate of 2e-2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `param` in place. `t` is the 1-based
/// step count.
pub fn adam_step(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, cfg: &AdamConfig) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        param[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
}

/// Adam over a named parameter collection. Tensors with
/// `requires_grad == false` or without an accumulated gradient are skipped.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    state: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            state: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update and clears the consumed gradients. `grad_scale`
    /// multiplies every gradient first (1.0 for plain steps).
    pub fn step<P: Parameterized + ?Sized>(&mut self, params: &mut P, grad_scale: f64) {
        self.t += 1;
        let t = self.t;
        let cfg = self.config;
        let state = &mut self.state;
        params.visit_mut("", &mut |name, tensor| {
            if !tensor.requires_grad() {
                return;
            }
            let Some(mut g) = tensor.take_grad() else { return };
            if grad_scale != 1.0 {
                g.iter_mut().for_each(|x| *x *= grad_scale);
            }
            let n = g.len();
            let (m, v) = state
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            adam_step(tensor.data_mut(), &g, m, v, t, &cfg);
        });
    }

    /// Clears moment estimates (used after parameters are replaced by an
    /// average, so stale moments do not leak across the rendezvous).
    pub fn reset(&mut self) {
        self.t = 0;
        self.state.clear();
    }
}
