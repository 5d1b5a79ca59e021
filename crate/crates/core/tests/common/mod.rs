//! Central finite-difference oracle shared by the gradient tests.

#![allow(dead_code)]

use kmeta_core::{Graph, NodeId, Result, Tensor};

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Builds `loss = Σ w ⊙ f(inputs)` and compares autodiff against central
/// differences for every input entry. Returns the worst relative error.
pub fn max_grad_error<F>(inputs: &[Tensor], weights: &Tensor, h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |xs: &[Tensor]| -> Result<(Graph, Vec<NodeId>, NodeId)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = xs.iter().map(|x| g.leaf(x.clone())).collect::<Result<_>>()?;
        let out = f(&mut g, &ids)?;
        let w = g.constant(weights.clone())?;
        let prod = g.mul(out, w)?;
        let loss = g.sum(prod)?;
        Ok((g, ids, loss))
    };

    let (g, ids, loss) = eval(inputs)?;
    let grads = g.backward(loss)?;
    let mut worst = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads
            .get(ids[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape()));
        for i in 0..x.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let (gp, _, lp) = eval(&plus)?;
            let (gm, _, lm) = eval(&minus)?;
            let numeric = (gp.value(lp).data()[0] - gm.value(lm).data()[0]) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[i], numeric, 1e-6));
        }
    }
    Ok(worst)
}
