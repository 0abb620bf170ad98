use crate::autodiff::{ParamStore, Tensor};
use crate::error::{bail, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First and second moments, one tensor per parameter, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        Self::for_tensors(params.tensors())
    }

    pub fn for_tensors(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }
}

/// One bias-corrected Adam update. Nothing is modified if any gradient is non-finite.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64, hyper: &AdamParams) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        bail!(Shape, "adam: {} params, {} grads, {} moments", params.len(), grads.len(), state.m.len());
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() || p.shape() != state.v[i].shape() {
            bail!(Shape, "adam: parameter {} has shape {:?} but gradient {:?}", i, p.shape(), g.shape());
        }
        if let Some(j) = g.data().iter().position(|v| !v.is_finite()) {
            bail!(Numeric, "non-finite gradient {} at parameter {} element {}", g.data()[j], i, j);
        }
    }
    state.t += 1;
    let AdamParams { beta1, beta2, epsilon } = *hyper;
    let c1 = 1.0 - beta1.powi(state.t.min(i32::MAX as u64) as i32);
    let c2 = 1.0 - beta2.powi(state.t.min(i32::MAX as u64) as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mm, gg) in m.iter_mut().zip(g) {
            *mm = beta1 * *mm + (1.0 - beta1) * gg;
        }
        let v = state.v[i].data_mut();
        for (vv, gg) in v.iter_mut().zip(g) {
            *vv = beta2 * *vv + (1.0 - beta2) * gg * gg;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for ((w, mm), vv) in p.data_mut().iter_mut().zip(m).zip(v) {
            *w -= lr * (mm / c1) / ((vv / c2).sqrt() + epsilon);
        }
    }
    Ok(())
}
