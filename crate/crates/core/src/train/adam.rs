use crate::error::{dim_err, Error, Result};
use crate::model::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step(params: &mut ParamStore, grads: &[Vec<f32>], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return dim_err(format!(
            "{} gradients and {} moment buffers for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        ));
    }
    let ids: Vec<_> = params.ids().collect();
    for (&id, g) in ids.iter().zip(grads) {
        if g.len() != params.get(id).numel() {
            return dim_err(format!(
                "gradient of length {} for {} of shape {:?}",
                g.len(),
                params.name(id),
                params.get(id).shape()
            ));
        }
        if let Some(i) = g.iter().position(|x| x.is_nan()) {
            return Err(Error::Numeric(format!(
                "NaN gradient in parameter {} at element {i}",
                params.name(id)
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (k, (&id, g)) in ids.iter().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (i, p) in params.get_mut(id).data_mut().iter_mut().enumerate() {
            let gi = g[i] as f64;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let update = cfg.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.eps);
            if update != 0.0 {
                *p = (*p as f64 - update) as f32;
            }
        }
    }
    Ok(())
}
