use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::Scalar;

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1.0,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    pub t: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update. Biases are not decayed.
///
/// Gradients are checked before anything is modified, so a failed step
/// leaves both `params` and `state` untouched.
pub fn adamw_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    state: &mut OptimizerState<T>,
    hp: &AdamW,
) -> Result<()> {
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::Numeric(format!("non-finite gradient in {name}")));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    let groups = params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut().into_iter().zip(state.v.tensors_mut()));
    for ((w, g), (m, v)) in groups {
        let decay = if w.is_bias { 0.0 } else { hp.lr * hp.weight_decay };
        for (((w, g), m), v) in w.data.iter_mut().zip(g.data).zip(m.data.iter_mut()).zip(v.data.iter_mut()) {
            let g = g.as_f64();
            let m_new = hp.beta1 * m.as_f64() + (1.0 - hp.beta1) * g;
            let v_new = hp.beta2 * v.as_f64() + (1.0 - hp.beta2) * g * g;
            *m = T::from_f64_lossy(m_new);
            *v = T::from_f64_lossy(v_new);
            let m_hat = m_new / bc1;
            let v_hat = v_new / bc2;
            let x = w.as_f64();
            *w = T::from_f64_lossy(x - decay * x - hp.lr * m_hat / (v_hat.sqrt() + hp.eps));
        }
    }
    Ok(())
}
