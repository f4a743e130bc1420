use serde::{Deserialize, Serialize};

use super::TrainingError;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn zeros_like(params: &[&[T]]) -> Self {
        let z: Vec<Vec<T>> = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        Self {
            m: z.clone(),
            v: z,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<T: Real>(
    params: &mut [&mut Vec<T>],
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    config: &AdamConfig,
) -> Result<(), TrainingError> {
    let conforms = params.len() == grads.len()
        && params.len() == state.m.len()
        && params.len() == state.v.len()
        && (0..params.len()).all(|i| {
            let n = params[i].len();
            grads[i].len() == n && state.m[i].len() == n && state.v[i].len() == n
        });
    if !conforms {
        return Err(TrainingError::AdamShape);
    }
    state.step += 1;
    let t = state.step as i32;
    let c = |x: f64| T::from_f64_lossy(x);
    let (b1, b2) = (c(config.beta1), c(config.beta2));
    let (one_b1, one_b2) = (c(1.0 - config.beta1), c(1.0 - config.beta2));
    let bc1 = c(1.0 - config.beta1.powi(t));
    let bc2 = c(1.0 - config.beta2.powi(t));
    let (lr, eps) = (c(config.learning_rate), c(config.epsilon));
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((p, &g), m), v) in p.iter_mut().zip(&grads[i]).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
