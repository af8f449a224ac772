//! First-order adaptive-moment optimizer (Adam).
//!
//! One instance owns the moment state for a keyed set of parameter
//! tensors. State is created lazily per key and never shared between
//! runs; callers construct a fresh optimizer for every optimization so
//! moments cannot leak across baselines.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied before the moment update.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn with_decay(learning_rate: f64, weight_decay: f64) -> Self {
        AdamConfig {
            weight_decay,
            ..AdamConfig::with_lr(learning_rate)
        }
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

pub struct Adam<K: Ord + Clone> {
    cfg: AdamConfig,
    step: u64,
    state: BTreeMap<K, Moments>,
}

impl<K: Ord + Clone + std::fmt::Debug> Adam<K> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    /// Advance the shared step counter. Call once per optimization step,
    /// before updating the step's parameters.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one Adam update to `param` under `key`'s moment state.
    pub fn update(&mut self, key: &K, param: &mut [f64], grad: &[f64]) -> Result<()> {
        if param.len() != grad.len() {
            return Err(Error::Shape(format!(
                "gradient of {} values for parameter {key:?} of {}",
                grad.len(),
                param.len()
            )));
        }
        if self.step == 0 {
            return Err(Error::Graph("Adam::update before begin_step".into()));
        }
        let st = self.state.entry(key.clone()).or_insert_with(|| Moments {
            m: vec![0.0; param.len()],
            v: vec![0.0; param.len()],
        });
        if st.m.len() != param.len() {
            return Err(Error::Shape(format!(
                "parameter {key:?} changed size under one optimizer"
            )));
        }
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let lr = self.cfg.learning_rate;
        let decay = self.cfg.weight_decay;
        for i in 0..param.len() {
            if decay != 0.0 {
                param[i] -= lr * decay * param[i];
            }
            let g = grad[i];
            st.m[i] = b1 * st.m[i] + (1.0 - b1) * g;
            st.v[i] = b2 * st.v[i] + (1.0 - b2) * g * g;
            let mhat = st.m[i] / bc1;
            let vhat = st.v[i] / bc2;
            param[i] -= lr * mhat / (vhat.sqrt() + self.cfg.eps);
        }
        Ok(())
    }
}
