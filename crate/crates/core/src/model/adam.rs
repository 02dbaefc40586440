use super::{Gradients, ModelParams};
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates, laid out like [`Gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Gradients,
    pub v: Gradients,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: Gradients::zeros_like(params),
            v: Gradients::zeros_like(params),
        }
    }
}

/// One bias-corrected Adam update at 1-based `step`.
///
/// Non-finite gradients are rejected before anything is modified. Updated
/// parameters are rounded to `f32` precision.
pub fn adam_step(params: &mut ModelParams, grads: &Gradients, state: &mut AdamState, step: u64, lr: f64) -> Result<()> {
    if step == 0 {
        return Err(Error::Argument("Adam step index is 1-based".into()));
    }
    if grads.layers.len() != params.layers().len()
        || grads
            .layers
            .iter()
            .zip(params.layers())
            .any(|(g, p)| g.weight.len() != p.weight.len() || g.bias.len() != p.bias.len())
    {
        return Err(Error::Shape("gradient shapes do not match the parameters".into()));
    }
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    let bc1 = 1.0 - ADAM_BETA1.powi(step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(step as i32);
    for (li, layer) in params.layers_mut().iter_mut().enumerate() {
        let g = &grads.layers[li];
        let m = &mut state.m.layers[li];
        let v = &mut state.v.layers[li];
        update(&mut layer.weight, &g.weight, &mut m.weight, &mut v.weight, bc1, bc2, lr);
        update(&mut layer.bias, &g.bias, &mut m.bias, &mut v.bias, bc1, bc2, lr);
    }
    Ok(())
}

fn update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], bc1: f64, bc2: f64, lr: f64) {
    for i in 0..p.len() {
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] = (p[i] - lr * m_hat / (v_hat.sqrt() + ADAM_EPS)) as f32 as f64;
    }
}
