use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelWeights;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, aligned with the canonical parameter
/// order of the weights they were created for.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ModelWeights) -> Self {
        let zeros: Vec<Tensor> = params.values().into_iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One Adam update of a flat parameter buffer. `t` is the 1-based step.
pub fn adam_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64, cfg: &AdamConfig) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Applies one Adam step to every tensor of `params`. Gradients are checked
/// before anything is modified; a non-finite entry aborts the step and names
/// the offending tensor.
pub fn adam_step(params: &mut ModelWeights, grads: &ModelWeights, state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    let grads = grads.named();
    if grads.len() != state.m.len() || grads.len() != params.tensor_count() {
        return Err(Error::Contract(format!(
            "adam: {} parameters, {} gradients, {} moment tensors",
            params.tensor_count(),
            grads.len(),
            state.m.len()
        )));
    }
    for (name, g) in &grads {
        if !g.is_finite() {
            return Err(Error::Diverged(format!("non-finite gradient in {name}")));
        }
    }
    state.step += 1;
    let t = state.step;
    let mut i = 0;
    let mut mismatch = None;
    params.for_each_mut(|name, p| {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let g = grads[i].1;
        if p.shape() != g.shape() || p.shape() != m.shape() {
            mismatch.get_or_insert_with(|| name.to_string());
        } else {
            adam_update(p.data_mut(), g.data(), m.data_mut(), v.data_mut(), t, lr, cfg);
        }
        i += 1;
    });
    match mismatch {
        Some(name) => Err(Error::Contract(format!("adam: shape mismatch for {name}"))),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let (mut p, mut m, mut v) = ([1.0], [0.0], [0.0]);
        adam_update(&mut p, &[2.0], &mut m, &mut v, 1, 0.1, &AdamConfig::default());
        assert!((p[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let (mut p, mut m, mut v) = ([0.3, -2.0], [0.0; 2], [0.0; 2]);
        adam_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, 0.1, &AdamConfig::default());
        assert_eq!(p, [0.3, -2.0]);
    }
}
