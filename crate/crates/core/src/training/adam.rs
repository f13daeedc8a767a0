use crate::error::{IaplError, Result};
use crate::params::ModelParams;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter index, created on first use.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    moments: Vec<Option<(Tensor, Tensor)>>,
    pub step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn moments(&self, idx: usize) -> Option<(&Tensor, &Tensor)> {
        self.moments.get(idx)?.as_ref().map(|(m, v)| (m, v))
    }
}

/// One bias-corrected Adam update of every tensor that has a gradient.
/// Tensors absent from `grads` are left untouched. Gradients are checked
/// before anything is modified.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[(usize, Tensor)],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    for (idx, g) in grads {
        if *idx >= params.len() || g.shape() != params.by_index(*idx).shape() {
            return Err(IaplError::Training {
                tensor: params.name(*idx).to_string(),
                msg: "gradient shape does not match parameter".into(),
            });
        }
        if !g.is_finite() {
            return Err(IaplError::Training {
                tensor: params.name(*idx).to_string(),
                msg: "non-finite gradient".into(),
            });
        }
    }
    if state.moments.len() < params.len() {
        state.moments.resize(params.len(), None);
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (idx, g) in grads {
        let (m, v) = state.moments[*idx].get_or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
        let p = params.by_index_mut(*idx);
        for (((pi, mi), vi), gi) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *pi -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
