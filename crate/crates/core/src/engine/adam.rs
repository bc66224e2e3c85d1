//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// First and second moments, one buffer per parameter.
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .iter()
            .map(|(_, p)| vec![0.0; p.tensor.numel()])
            .collect();
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update from the gradients held in `store`. Parameters that are
    /// frozen or received no gradient are skipped.
    ///
    /// Every gradient is checked before anything is written, so a NaN leaves
    /// the store untouched.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::contract(
                "optimiser state does not match the parameter store",
            ));
        }
        for (_, p) in store.iter() {
            if let Some(g) = p.tensor.grad() {
                if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "gradient of {} element {i} is {}",
                        p.name, g[i]
                    )));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for ((id, m), v) in store
            .ids()
            .collect::<Vec<_>>()
            .into_iter()
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let param = store.get_mut(id);
            if !param.trainable {
                continue;
            }
            let Some(g) = param.tensor.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            for (((x, g), m), v) in param
                .tensor
                .data_mut()
                .iter_mut()
                .zip(&g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .filter_map(|(_, p)| p.tensor.grad())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for (_, p) in store.iter_mut() {
            if let Some(g) = p.tensor.grad() {
                let scaled: Vec<f64> = g.iter().map(|v| v * s).collect();
                p.tensor.zero_grad();
                p.tensor.accumulate_grad(&scaled).expect("same length");
            }
        }
    }
    norm
}
