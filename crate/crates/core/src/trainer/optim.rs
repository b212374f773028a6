//! Adaptive-moment optimizer with global gradient-norm clipping.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{Checkpoint, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub step: u64,
    m: BTreeMap<usize, Tensor>,
    v: BTreeMap<usize, Tensor>,
}

/// Global L2 norm over all gradient entries.
pub fn grad_norm(grads: &[(ParamId, Tensor)]) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Scale gradients in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [(ParamId, Tensor)], max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// One bias-corrected update of the listed parameters.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) {
        self.step += 1;
        let b1t = 1.0 - BETA1.powi(self.step as i32);
        let b2t = 1.0 - BETA2.powi(self.step as i32);
        for (id, g) in grads {
            let m = self.m.entry(id.0).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(id.0).or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.get_mut(*id);
            let (md, vd, pd) = (m.data_mut(), v.data_mut(), p.data_mut());
            for (i, gi) in g.data().iter().enumerate() {
                md[i] = BETA1 * md[i] + (1.0 - BETA1) * gi;
                vd[i] = BETA2 * vd[i] + (1.0 - BETA2) * gi * gi;
                let mh = md[i] / b1t;
                let vh = vd[i] / b2t;
                pd[i] -= lr * mh / (vh.sqrt() + EPSILON);
            }
        }
    }

    /// Moments stored under `adam.m/<name>` and `adam.v/<name>`, the step
    /// count in metadata.
    pub fn save_into(&self, store: &ParamStore, ck: &mut Checkpoint) {
        for (i, t) in &self.m {
            ck.tensors.insert(format!("adam.m/{}", store.name(ParamId(*i))), t.clone());
        }
        for (i, t) in &self.v {
            ck.tensors.insert(format!("adam.v/{}", store.name(ParamId(*i))), t.clone());
        }
        ck.meta.insert("adam.step".into(), self.step.to_string());
    }

    pub fn load_from(store: &ParamStore, ck: &Checkpoint) -> Result<Self> {
        let step = ck
            .meta
            .get("adam.step")
            .ok_or_else(|| Error::Checkpoint("missing adam.step".into()))?
            .parse()
            .map_err(|_| Error::Checkpoint("invalid adam.step".into()))?;
        let mut out = Self {
            step,
            ..Self::default()
        };
        for (key, t) in &ck.tensors {
            let (map, name) = if let Some(n) = key.strip_prefix("adam.m/") {
                (&mut out.m, n)
            } else if let Some(n) = key.strip_prefix("adam.v/") {
                (&mut out.v, n)
            } else {
                continue;
            };
            let id = store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown parameter {name}")))?;
            if store.get(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!("optimizer state shape mismatch for {name}")));
            }
            map.insert(id.0, t.clone());
        }
        Ok(out)
    }
}
