//! Central finite-difference verification of tape gradients.

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{IcesError, Result};

pub const FD_STEP: f64 = 1e-5;

/// Relative error with a small absolute floor, so that two gradients that are
/// both numerically zero compare equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub coordinates: usize,
}

/// Compares the tape gradient of `loss` with respect to every entry of
/// `store` against central differences with step [`FD_STEP`].
///
/// `corrupt` perturbs the analytic gradient before comparison; it exists so
/// callers can confirm the checker flags a wrong gradient.
pub fn check_gradients<F>(store: &ParamStore, loss: F, corrupt: bool) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut with_grad = store.clone();
    with_grad.zero_grad();
    let mut tape = Tape::new();
    let out = loss(&mut tape, &with_grad)?;
    tape.backward(out);
    tape.accumulate_grads(&mut with_grad);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let v = loss(&mut t, s)?;
        let x = t.scalar(v);
        if !x.is_finite() {
            return Err(IcesError::Numeric("non-finite loss during gradient check".into()));
        }
        Ok(x)
    };

    let mut probe = store.clone();
    let mut worst = GradCheck { max_rel_error: 0.0, worst_param: String::new(), coordinates: 0 };
    for id in store.ids() {
        let analytic = with_grad
            .get(id)
            .grad
            .clone()
            .unwrap_or_else(|| vec![0.0; store.get(id).numel()]);
        for j in 0..analytic.len() {
            let orig = probe.get(id).data[j];
            probe.get_mut(id).data[j] = orig + FD_STEP;
            let up = eval(&probe)?;
            probe.get_mut(id).data[j] = orig - FD_STEP;
            let down = eval(&probe)?;
            probe.get_mut(id).data[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let mut a = analytic[j];
            if corrupt {
                a = a * 1.1 + 1e-3;
            }
            let err = relative_error(a, numeric);
            worst.coordinates += 1;
            if err > worst.max_rel_error || worst.worst_param.is_empty() {
                worst.max_rel_error = err;
                worst.worst_param = format!("{}[{j}]", store.name(id));
            }
        }
    }
    Ok(worst)
}
