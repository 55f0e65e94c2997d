//! AdamW with decoupled weight decay and the cosine learning-rate schedule.

use std::collections::BTreeMap;

use vidpriv_tensor::{ParamStore, Tensor};

use crate::config::TrainingConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn from_config(t: &TrainingConfig) -> Self {
        Self::new(t.beta1, t.beta2, t.eps, t.weight_decay)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that has a gradient. A non-finite
    /// gradient aborts the step before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
            match params.get(name) {
                Some(p) if p.shape() == g.shape() => {}
                Some(p) => {
                    return Err(Error::Layout(format!(
                        "gradient {:?} for parameter {name} of shape {:?}",
                        g.shape(),
                        p.shape()
                    )))
                }
                None => return Err(Error::Config(format!("gradient for unknown parameter {name}"))),
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let decay = (1.0 - lr * self.weight_decay) as f32;
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = b1 * md[i] + (1.0 - b1) * gi;
                vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
                let mhat = md[i] as f64 / c1;
                let vhat = vd[i] as f64 / c2;
                pd[i] = pd[i] * decay - (lr * mhat / (vhat.sqrt() + self.eps)) as f32;
            }
        }
        Ok(())
    }

    /// Moment tensors as `m.{name}` / `v.{name}` for checkpointing.
    pub fn state(&self) -> ParamStore {
        let mut s = ParamStore::new();
        for (k, v) in &self.first {
            s.insert(format!("m.{k}"), v.clone());
        }
        for (k, v) in &self.second {
            s.insert(format!("v.{k}"), v.clone());
        }
        s
    }

    pub fn restore_state(&mut self, state: &ParamStore, step: u64) {
        self.first = state.with_prefix("m.").iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        self.second = state.with_prefix("v.").iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        self.step = step;
    }
}

/// `base_lr * (1 + cos(pi * step / total)) / 2`, clamped to the schedule.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}
