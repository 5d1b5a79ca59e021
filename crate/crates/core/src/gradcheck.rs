//! Finite-difference verification of end-to-end model gradients.

use crate::error::Result;
use crate::graph::Graph;
use crate::model::{Mode, ModelParams};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest `|a − n| / max(|a|, |n|, floor)` over all parameter entries.
    pub worst_rel_err: f64,
    pub worst_param: String,
    pub checked: usize,
}

fn loss_value(params: &ModelParams, support: &Tensor, query: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let loss = params.episode_loss(&mut g, support, query, &mut Mode::Eval)?;
    Ok(g.value(loss).data()[0])
}

/// Compares autodiff gradients of the dropout-free episode loss against
/// central differences with step `h`, for every scalar parameter.
pub fn episode_gradients(
    params: &ModelParams,
    support: &Tensor,
    query: &Tensor,
    h: f64,
    floor: f64,
) -> Result<GradCheck> {
    let mut g = Graph::new();
    let loss = params.episode_loss(&mut g, support, query, &mut Mode::Eval)?;
    let analytic = g.param_grads(&g.backward(loss)?);

    let mut probe = params.clone();
    let mut report = GradCheck {
        worst_rel_err: 0.0,
        worst_param: String::new(),
        checked: 0,
    };
    for (name, grad) in &analytic {
        for i in 0..grad.numel() {
            let orig = params.store.get(name).expect("same keys").data()[i];
            probe.store.get_mut(name).expect("same keys").data_mut()[i] = orig + h;
            let plus = loss_value(&probe, support, query)?;
            probe.store.get_mut(name).expect("same keys").data_mut()[i] = orig - h;
            let minus = loss_value(&probe, support, query)?;
            probe.store.get_mut(name).expect("same keys").data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if err > report.worst_rel_err {
                report.worst_rel_err = err;
                report.worst_param = format!("{name}[{i}]");
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
