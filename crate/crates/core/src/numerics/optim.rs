use serde::{Deserialize, Serialize};

use super::{Gradients, NumericsError, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.99,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamMoments {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One bias-corrected Adam update in place. `step` counts from 1.
///
/// A gradient with any non-finite entry leaves both the parameter and the
/// moments untouched and returns `false`.
pub fn adam_step(
    param: &mut [f64],
    grad: &[f64],
    state: &mut AdamMoments,
    cfg: &AdamConfig,
    step: u64,
) -> Result<bool, NumericsError> {
    if param.len() != grad.len() || state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "adam_step",
            left: vec![param.len()],
            right: vec![grad.len()],
        });
    }
    if step == 0 {
        return Err(NumericsError::InvalidArgument("adam step counts from 1"));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Ok(false);
    }
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        param[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(true)
}

/// Adam over a whole [`ParamStore`]. Parameters without a gradient in a given
/// call are left alone and their moments are not decayed.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<Option<AdamMoments>>,
    skipped: usize,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
            skipped: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Tensors whose update was skipped because of a non-finite gradient.
    pub fn skipped_updates(&self) -> usize {
        self.skipped
    }

    pub fn moments(&self, index: usize) -> Option<&AdamMoments> {
        self.moments.get(index).and_then(Option::as_ref)
    }

    /// Restores saved state, e.g. from a checkpoint.
    pub fn restore(&mut self, step: u64, moments: Vec<Option<AdamMoments>>) {
        self.step = step;
        self.moments = moments;
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<(), NumericsError> {
        if grads.is_empty() {
            return Ok(());
        }
        self.step += 1;
        if self.moments.len() < params.len() {
            self.moments.resize(params.len(), None);
        }
        for (id, g) in grads.iter() {
            let t = params.get_mut(id);
            let state = self.moments[id.index()].get_or_insert_with(|| AdamMoments::zeros(g.len()));
            if !adam_step(t.data_mut(), g, state, &self.config, self.step)? {
                self.skipped += 1;
            }
        }
        Ok(())
    }
}
