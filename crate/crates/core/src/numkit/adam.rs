use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

impl AdamState {
    pub fn for_shape(shape: &[usize]) -> Self {
        AdamState {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            step: 0,
        }
    }
}

pub fn init_states(store: &ParamStore) -> Vec<AdamState> {
    store
        .iter()
        .map(|(_, p)| AdamState::for_shape(p.value.shape()))
        .collect()
}

/// One bias-corrected Adam update of every parameter from its stored grad.
/// Gradients are left in place; the caller zeroes them.
pub fn adam_step(store: &mut ParamStore, states: &mut [AdamState], cfg: &AdamConfig) -> Result<()> {
    if states.len() != store.len() {
        return Err(Error::invalid(format!(
            "{} optimizer states for {} parameters",
            states.len(),
            store.len()
        )));
    }
    for (p, st) in store.params_mut().iter_mut().zip(states.iter_mut()) {
        if st.m.shape() != p.value.shape() {
            return Err(Error::invalid(format!(
                "optimizer state for {} has shape {:?}, parameter has {:?}",
                p.name,
                st.m.shape(),
                p.value.shape()
            )));
        }
        st.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(st.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(st.step as i32);
        let g = p.grad.data();
        let m = st.m.data_mut();
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
        }
        let v = st.v.data_mut();
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
        }
        let (m, v) = (st.m.data(), st.v.data());
        for ((w, mi), vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
