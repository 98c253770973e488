//! Adam with bias correction and array-level masking for phase freezing.

use crate::autodiff::GradientVector;
use crate::neural::ModelParams;

/// Per-array first/second moments plus the shared step counter. One state
/// exists per phase mask; frozen arrays' moments are never touched.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        AdamState {
            m: params.arrays.iter().map(|a| vec![0.0; a.data.len()]).collect(),
            v: params.arrays.iter().map(|a| vec![0.0; a.data.len()]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update applied to the masked arrays only.
/// Unmasked arrays and their moments are bitwise untouched.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &GradientVector,
    state: &mut AdamState,
    lr: f64,
    mask: &[usize],
) {
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    for &slot in mask {
        let p = &mut params.arrays[slot].data;
        let g = &grads.arrays[slot];
        let m = &mut state.m[slot];
        let v = &mut state.v[slot];
        for i in 0..p.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
}
