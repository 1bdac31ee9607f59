//! Adam optimizer over a named subset of parameters.

use super::params::ParameterStore;
use crate::error::{Error, Result};

/// Bias-corrected Adam state bound to a fixed parameter subset.
#[derive(Debug, Clone)]
pub struct Adam {
    names: Vec<String>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    /// Binds the optimizer to `names` (which must all exist in the store).
    pub fn new(
        store: &ParameterStore,
        names: Vec<String>,
        lr: f64,
        betas: (f64, f64),
    ) -> Result<Self> {
        let mut m = Vec::with_capacity(names.len());
        let mut v = Vec::with_capacity(names.len());
        for name in &names {
            let e = store
                .get(name)
                .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))?;
            m.push(vec![0.0; e.values.len()]);
            v.push(vec![0.0; e.values.len()]);
        }
        Ok(Self {
            names,
            m,
            v,
            step: 0,
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update; consumes (clears) the gradients of every
    /// bound parameter. A bound parameter without a gradient is an error.
    pub fn step(&mut self, store: &mut ParameterStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (k, name) in self.names.iter().enumerate() {
            let e = store
                .get_mut(name)
                .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))?;
            let g = e
                .grad
                .take()
                .ok_or_else(|| Error::invalid(format!("parameter {name:?} has no gradient")))?;
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                e.values[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Scales the gradients of `names` so their global L2 norm is at most
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm(
    store: &mut ParameterStore,
    names: &[String],
    max_norm: f64,
) -> Result<f64> {
    let mut sq = 0.0;
    for name in names {
        let e = store
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))?;
        if let Some(g) = &e.grad {
            sq += g.iter().map(|x| x * x).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for name in names {
            if let Some(g) = &mut store.get_mut(name).unwrap().grad {
                for x in g.iter_mut() {
                    *x *= s;
                }
            }
        }
    }
    Ok(norm)
}
