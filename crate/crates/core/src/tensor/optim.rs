use serde::{Deserialize, Serialize};

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// AdamW hyperparameters (decoupled weight decay).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// First/second moment estimates for one tensor.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

/// One AdamW update over aligned `params` and `states`. Gradients are read
/// from each tensor's accumulator; a missing gradient counts as zero.
/// Moments are kept in f64 regardless of the tensor element type.
pub fn adamw_step<T: Element>(
    params: &mut [&mut Tensor<T>],
    states: &mut [AdamState],
    hp: &AdamW,
    step_index: usize,
) -> Result<()> {
    if params.len() != states.len() {
        return Err(Error::Contract(format!(
            "{} parameters but {} optimizer states",
            params.len(),
            states.len()
        )));
    }
    for p in params.iter() {
        if let Some(g) = p.grad() {
            if g.iter().any(|x| x.is_nan()) {
                return Err(Error::Training {
                    step: step_index,
                    reason: format!("NaN gradient for tensor of shape {:?}", p.shape()),
                });
            }
        }
    }
    for (p, st) in params.iter_mut().zip(states.iter_mut()) {
        let n = p.len();
        if st.m.len() != n {
            st.m = vec![0.0; n];
            st.v = vec![0.0; n];
            st.step = 0;
        }
        st.step += 1;
        let bc1 = 1.0 - hp.beta1.powi(st.step as i32);
        let bc2 = 1.0 - hp.beta2.powi(st.step as i32);
        let grad: Vec<f64> = match p.grad() {
            Some(g) => g.iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; n],
        };
        let data = p.data_mut();
        for i in 0..n {
            let g = grad[i];
            st.m[i] = hp.beta1 * st.m[i] + (1.0 - hp.beta1) * g;
            st.v[i] = hp.beta2 * st.v[i] + (1.0 - hp.beta2) * g * g;
            let mhat = st.m[i] / bc1;
            let vhat = st.v[i] / bc2;
            let mut w = data[i].as_f64();
            w -= hp.lr * hp.weight_decay * w;
            w -= hp.lr * mhat / (vhat.sqrt() + hp.eps);
            data[i] = T::from_f64(w);
        }
    }
    Ok(())
}
