use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::float::Float;
use super::params::{Layout, Params};
use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments mirroring the parameter layout, plus the step counter.
#[derive(Debug, Clone)]
pub struct OptState<T> {
    pub config: AdamConfig,
    pub m: Params<T>,
    pub v: Params<T>,
    pub step: u64,
}

impl<T: Float> OptState<T> {
    pub fn new(layout: Arc<Layout>, config: AdamConfig) -> Self {
        OptState {
            config,
            m: Params::zeros(layout.clone()),
            v: Params::zeros(layout),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<T: Float>(
    p: &mut Params<T>,
    grads: &Params<T>,
    st: &mut OptState<T>,
) -> Result<(), ModelError> {
    let n = p.data().len();
    if grads.data().len() != n || st.m.data().len() != n || st.v.data().len() != n {
        return Err(ModelError::Shape(
            "optimizer state does not match parameters".into(),
        ));
    }
    st.step += 1;
    let c = st.config;
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let bc1 = T::of(1.0 - c.beta1.powi(st.step.min(i32::MAX as u64) as i32));
    let bc2 = T::of(1.0 - c.beta2.powi(st.step.min(i32::MAX as u64) as i32));
    let (lr, eps) = (T::of(c.learning_rate), T::of(c.eps));
    let (one, m, v) = (T::one(), st.m.data_mut(), st.v.data_mut());
    for (((w, &g), m), v) in p
        .data_mut()
        .iter_mut()
        .zip(grads.data())
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let mhat = *m / bc1;
        let vhat = *v / bc2;
        *w -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}
