use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::{Checkpoint, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub step: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        AdamState {
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn moments(&self, name: &str) -> Option<(&[T], &[T])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

impl AdamState<f32> {
    pub fn save_into(&self, ckpt: &mut Checkpoint) {
        ckpt.push("adam.step", Tensor::from_vec(vec![self.step as f32]));
        for (name, (m, v)) in &self.moments {
            ckpt.push(format!("adam.m.{name}"), Tensor::from_vec(m.clone()));
            ckpt.push(format!("adam.v.{name}"), Tensor::from_vec(v.clone()));
        }
    }

    pub fn load_from(ckpt: &Checkpoint) -> Result<Self> {
        let step = ckpt.require("adam.step")?.item()?;
        if !(step >= 0.0 && step.fract() == 0.0 && step < 16_777_216.0) {
            return Err(Error::format("checkpoint", format!("invalid adam.step {step}")));
        }
        let mut moments = BTreeMap::new();
        for (name, t) in ckpt.entries() {
            if let Some(p) = name.strip_prefix("adam.m.") {
                let v = ckpt.require(&format!("adam.v.{p}"))?;
                moments.insert(p.to_string(), (t.data().to_vec(), v.data().to_vec()));
            }
        }
        Ok(AdamState {
            step: step as u64,
            moments,
        })
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Vec<T>>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1 as f64, cfg.beta2 as f64);
    let c1 = T::lit(1.0 - b1.powi(t));
    let c2 = T::lit(1.0 - b2.powi(t));
    let (b1, b2) = (T::lit(b1), T::lit(b2));
    let (lr, eps) = (T::lit(cfg.lr as f64), T::lit(cfg.eps as f64));
    for (name, g) in grads {
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter `{name}`")))?;
        if p.numel() != g.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: vec![g.len()],
            });
        }
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
