//! Adam with decoupled weight decay.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Per-parameter moment estimates plus the update counter.
#[derive(Clone, Debug)]
pub struct OptimizerState<T: Element = f32> {
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
    pub step: u64,
    pub base_lr: f64,
    pub weight_decay: f64,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>, base_lr: f64, weight_decay: f64) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect()
        };
        OptimizerState {
            first_moment: zeros(),
            second_moment: zeros(),
            step: 0,
            base_lr,
            weight_decay,
        }
    }
}

/// One bias-corrected Adam update. Weight decay is decoupled:
/// `p ← p − lr·wd·p` before the moment step.
pub fn adam_step<T: Element>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::param(format!("learning rate must be positive, got {lr}")));
    }
    if grads.len() != params.len() || state.first_moment.len() != params.len() {
        return Err(Error::validation(format!(
            "{} gradients / {} moments for {} parameters",
            grads.len(),
            state.first_moment.len(),
            params.len()
        )));
    }
    for (name, g) in params.names().iter().zip(grads) {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    let (b1, b2) = (T::from_f64_lossy(BETA1), T::from_f64_lossy(BETA2));
    let step_size = T::from_f64_lossy(lr / bc1);
    let bc2_sqrt = T::from_f64_lossy(bc2.sqrt());
    let eps = T::from_f64_lossy(EPS);
    let decay = T::from_f64_lossy(1.0 - lr * weight_decay);
    let names = params.names().to_vec();
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let g = grads[i].data();
        if g.len() != p.numel() {
            return Err(Error::shape("adam_step", p.shape(), grads[i].shape()).within(&names[i]));
        }
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            *p = *p * decay - step_size * *m / ((*v).sqrt() / bc2_sqrt + eps);
        }
    }
    Ok(())
}
