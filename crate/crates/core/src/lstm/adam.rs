use super::{ClipScope, Layout, Tensor, TrainConfig};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }
}

pub fn gradient_norm(grads: &[f64]) -> f64 {
    grads.iter().map(|g| g * g).sum::<f64>().sqrt()
}

fn clip_slice(grads: &mut [f64], threshold: f64) {
    let norm = gradient_norm(grads);
    if norm > threshold {
        let scale = threshold / norm;
        grads.iter_mut().for_each(|g| *g *= scale);
    }
}

/// Rescales gradients whose L2 norm exceeds `threshold`, either over the
/// whole vector or tensor by tensor.
pub fn clip_gradients(grads: &mut [f64], layout: Layout, threshold: f64, scope: ClipScope) {
    match scope {
        ClipScope::Global => clip_slice(grads, threshold),
        ClipScope::PerTensor => {
            for t in Tensor::ALL {
                clip_slice(&mut grads[layout.range(t)], threshold);
            }
        }
    }
}

/// One clipped, bias-corrected Adam update. `grads` is clipped in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &mut [f64],
    state: &mut AdamState,
    layout: Layout,
    config: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != grads.len() {
        return Err(Error::Dimension("parameter, gradient and moment lengths differ".into()));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i}")));
    }
    clip_gradients(grads, layout, config.clip_threshold, config.clip_scope);
    state.t += 1;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (((p, &g), m), v) in params.iter_mut().zip(grads.iter()).zip(&mut state.m).zip(&mut state.v) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
    }
    Ok(())
}
