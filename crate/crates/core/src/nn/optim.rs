use super::params::ParamStore;
use crate::error::{IcesError, Result};

/// Adam accumulators for one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn for_store(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Global L2 norm over every gradient buffer present in `store`.
pub fn grad_norm(store: &ParamStore) -> f64 {
    store
        .tensors()
        .iter()
        .filter_map(|t| t.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

fn check_finite(store: &ParamStore) -> Result<()> {
    for (name, t) in store.iter() {
        if let Some(g) = &t.grad {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(IcesError::Numeric(format!("non-finite gradient in `{name}`")));
            }
        }
    }
    Ok(())
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> Result<f64> {
    check_finite(store)?;
    let norm = grad_norm(store);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for t in store.tensors_mut() {
            if let Some(g) = &mut t.grad {
                g.iter_mut().for_each(|x| *x *= scale);
            }
        }
    }
    Ok(norm)
}

/// One bias-corrected Adam update using the gradients stored on `store`.
/// Tensors without a gradient are left untouched.
pub fn adam_step(store: &mut ParamStore, state: &mut OptimizerState, lr: f64) -> Result<()> {
    if state.first_moment.len() != store.len() {
        return Err(IcesError::Dimension(format!(
            "optimizer tracks {} tensors, store has {}",
            state.first_moment.len(),
            store.len()
        )));
    }
    check_finite(store)?;
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (k, tensor) in store.tensors_mut().iter_mut().enumerate() {
        let Some(g) = tensor.grad.as_ref() else { continue };
        let m = &mut state.first_moment[k];
        let v = &mut state.second_moment[k];
        if m.len() != g.len() {
            return Err(IcesError::Dimension("optimizer accumulator shape".into()));
        }
        for j in 0..g.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            tensor.data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
