//! Adam with bias correction and decoupled weight decay.

use log::warn;

use crate::model::ParamStore;
use crate::numcore::Precision;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> AdamConfig {
        AdamConfig {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    SkippedNonFinite,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> AdamState {
        AdamState {
            m: store.values().iter().map(|v| vec![0.0; v.len()]).collect(),
            v: store.values().iter().map(|v| vec![0.0; v.len()]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over the whole store. `grads` aligns with the store's
    /// declaration order; missing entries are treated as zero. A non-finite
    /// gradient anywhere skips the entire step (logged).
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Vec<f64>>],
        cfg: &AdamConfig,
        precision: Precision,
    ) -> StepOutcome {
        assert_eq!(grads.len(), store.values().len());
        for g in grads.iter().flatten() {
            if g.iter().any(|x| !x.is_finite()) {
                warn!("non-finite gradient; optimizer step skipped");
                return StepOutcome::SkippedNonFinite;
            }
        }
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (pi, value) in store.values_mut().iter_mut().enumerate() {
            let zero;
            let g: &[f64] = match &grads[pi] {
                Some(g) => g,
                None => {
                    zero = vec![0.0; value.len()];
                    &zero
                }
            };
            let (m, v) = (&mut self.m[pi], &mut self.v[pi]);
            for i in 0..value.len() {
                // decoupled decay happens before the adaptive update
                value[i] -= cfg.lr * cfg.weight_decay * value[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] = precision.quantize(value[i] - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps));
            }
        }
        StepOutcome::Applied
    }
}
