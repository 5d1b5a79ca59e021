//! Reverse-mode automatic differentiation over an append-only node list.
//!
//! Every operation pushes a node holding its forward value; node inputs
//! always have smaller indices, so a single reverse sweep over the list is
//! a valid topological order for the backward pass.

use std::collections::BTreeMap;

use rand::Rng;

use crate::adam::{Grads, ParamStore};
use crate::error::{Error, Result};
use crate::linalg::{self, PinvResult};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Concat { inputs: Vec<NodeId>, axis: usize },
    Slice { input: NodeId, axis: usize, start: usize },
    Mean { input: NodeId, axis: usize },
    Sum(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Dropout { input: NodeId, mask: Vec<f64> },
    SquaredError(NodeId, NodeId),
    Transpose(NodeId),
    Pinv(NodeId),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
}

/// Per-node gradients from one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.is_matrix() {
        Ok((t.rows(), t.cols()))
    } else {
        Err(Error::invalid(op, format!("expected a matrix, got shape {:?}", t.shape())))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// A leaf that gradients flow into but that is not a named parameter.
    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Leaf, value, "leaf")
    }

    /// Alias of [`Graph::leaf`] for values whose gradient is never read.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.leaf(value)
    }

    /// Leaf bound to a named parameter. Repeated calls for the same name
    /// return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::KeyMismatch(format!("unknown parameter {name}")))?
            .clone();
        let id = self.leaf(value)?;
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), value, "matmul")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        self.push(Op::Add(a, b), value, "add")
    }

    /// Adds a `1 × n` row to every row of an `m × n` matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (va, vr) = (self.value(a), self.value(row));
        let (m, n) = matrix_dims("add_row", va)?;
        if vr.shape() != [1, n] {
            return Err(Error::shape("add_row", va.shape(), vr.shape()));
        }
        let mut out = va.clone();
        for i in 0..m {
            for (o, r) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(vr.data()) {
                *o += r;
            }
        }
        self.push(Op::AddRow(a, row), out, "add_row")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).sub(self.value(b))?;
        self.push(Op::Sub(a, b), value, "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_with("mul", self.value(b), |x, y| x * y)?;
        self.push(Op::Mul(a, b), value, "mul")
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let value = self.value(a).scale(s);
        self.push(Op::Scale(a, s), value, "scale")
    }

    /// Concatenates matrices along `axis` (0 stacks rows, 1 appends columns).
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        if inputs.is_empty() || axis > 1 {
            return Err(Error::invalid("concat", "needs inputs and axis 0 or 1"));
        }
        let first = self.value(inputs[0]);
        let (r0, c0) = matrix_dims("concat", first)?;
        let value = if axis == 0 {
            let mut data = Vec::new();
            let mut rows = 0;
            for &id in inputs {
                let v = self.value(id);
                let (r, c) = matrix_dims("concat", v)?;
                if c != c0 {
                    return Err(Error::shape("concat", first.shape(), v.shape()));
                }
                data.extend_from_slice(v.data());
                rows += r;
            }
            Tensor::matrix(rows, c0, data)
        } else {
            let mut widths = Vec::with_capacity(inputs.len());
            for &id in inputs {
                let v = self.value(id);
                let (r, c) = matrix_dims("concat", v)?;
                if r != r0 {
                    return Err(Error::shape("concat", first.shape(), v.shape()));
                }
                widths.push(c);
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(r0 * total);
            for i in 0..r0 {
                for &id in inputs {
                    data.extend_from_slice(self.value(id).row(i));
                }
            }
            Tensor::matrix(r0, total, data)
        };
        self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            value,
            "concat",
        )
    }

    /// Contiguous range `start..start + len` along `axis`.
    pub fn slice(&mut self, input: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(input);
        let (r, c) = matrix_dims("slice", v)?;
        let extent = if axis == 0 { r } else { c };
        if axis > 1 || len == 0 || start + len > extent {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {:?}", start + len, v.shape()),
            ));
        }
        let value = if axis == 0 {
            v.row_range(start, len)
        } else {
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&v.row(i)[start..start + len]);
            }
            Tensor::matrix(r, len, data)
        };
        self.push(Op::Slice { input, axis, start }, value, "slice")
    }

    /// Mean over `axis`, keeping it as a dimension of size one.
    pub fn mean(&mut self, input: NodeId, axis: usize) -> Result<NodeId> {
        let v = self.value(input);
        let (r, c) = matrix_dims("mean", v)?;
        let value = match axis {
            0 => {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for (o, x) in out.iter_mut().zip(v.row(i)) {
                        *o += x;
                    }
                }
                Tensor::matrix(1, c, out.into_iter().map(|s| s / r as f64).collect())
            }
            1 => Tensor::matrix(
                r,
                1,
                (0..r).map(|i| v.row(i).iter().sum::<f64>() / c as f64).collect(),
            ),
            _ => return Err(Error::invalid("mean", format!("axis {axis}"))),
        };
        self.push(Op::Mean { input, axis }, value, "mean")
    }

    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.value(input).sum());
        self.push(Op::Sum(input), value, "sum")
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        let value = self.value(input).map(|x| x.max(0.0));
        self.push(Op::Relu(input), value, "relu")
    }

    pub fn sigmoid(&mut self, input: NodeId) -> Result<NodeId> {
        let value = self.value(input).map(sigmoid);
        self.push(Op::Sigmoid(input), value, "sigmoid")
    }

    pub fn tanh(&mut self, input: NodeId) -> Result<NodeId> {
        let value = self.value(input).map(f64::tanh);
        self.push(Op::Tanh(input), value, "tanh")
    }

    /// Inverted dropout: each entry is kept with probability `1 − rate` and
    /// rescaled by `1 / (1 − rate)`. The mask is stored for backward.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: NodeId, rate: f64, rng: &mut R) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid("dropout", format!("rate {rate} outside [0, 1)")));
        }
        let keep = 1.0 - rate;
        let v = self.value(input);
        let mask: Vec<f64> = (0..v.numel())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let value = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().zip(&mask).map(|(x, m)| x * m).collect(),
        )?;
        self.push(Op::Dropout { input, mask }, value, "dropout")
    }

    /// `Σ (a − b)²` as a scalar.
    pub fn squared_error(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("squared_error", va.shape(), vb.shape()));
        }
        let s: f64 = va.data().iter().zip(vb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        self.push(Op::SquaredError(a, b), Tensor::scalar(s), "squared_error")
    }

    pub fn transpose(&mut self, input: NodeId) -> Result<NodeId> {
        let v = self.value(input);
        matrix_dims("transpose", v)?;
        let value = v.transpose();
        self.push(Op::Transpose(input), value, "transpose")
    }

    /// Moore–Penrose pseudo-inverse with the default cutoff.
    pub fn pinv(&mut self, input: NodeId) -> Result<NodeId> {
        self.pinv_with(input, linalg::DEFAULT_RCOND).map(|(id, _)| id)
    }

    /// Pseudo-inverse that also reports the singular values it used.
    ///
    /// The backward rule assumes the effective rank is locally constant; at a
    /// rank change the gradient is one-sided.
    pub fn pinv_with(&mut self, input: NodeId, rcond: f64) -> Result<(NodeId, PinvResult)> {
        matrix_dims("pinv", self.value(input))?;
        let result = linalg::pinv_detailed(self.value(input), rcond)?;
        let id = self.push(Op::Pinv(input), result.pinv.clone(), "pinv")?;
        Ok((id, result))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, vb.data(), true, &mut ga, false);
                accumulate(grads, *a, Tensor::matrix(m, k, ga));
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, va.data(), true, g.data(), false, &mut gb, false);
                accumulate(grads, *b, Tensor::matrix(k, n, gb));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g.clone());
                let (m, n) = (g.rows(), g.cols());
                let mut gr = vec![0.0; n];
                for i in 0..m {
                    for (o, x) in gr.iter_mut().zip(&g.data()[i * n..(i + 1) * n]) {
                        *o += x;
                    }
                }
                accumulate(grads, *row, Tensor::matrix(1, n, gr));
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let ga = g.zip_with("mul", self.value(*b), |x, y| x * y).expect("shapes");
                let gb = g.zip_with("mul", self.value(*a), |x, y| x * y).expect("shapes");
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s)),
            Op::Concat { inputs, axis } => {
                let mut offset = 0;
                for &id in inputs {
                    let v = self.value(id);
                    let (r, c) = (v.rows(), v.cols());
                    let part = if *axis == 0 {
                        g.row_range(offset, r)
                    } else {
                        let mut data = Vec::with_capacity(r * c);
                        for i in 0..r {
                            data.extend_from_slice(&g.row(i)[offset..offset + c]);
                        }
                        Tensor::matrix(r, c, data)
                    };
                    offset += if *axis == 0 { r } else { c };
                    accumulate(grads, id, part);
                }
            }
            Op::Slice { input, axis, start } => {
                let v = self.value(*input);
                let (r, c) = (v.rows(), v.cols());
                let mut full = Tensor::zeros(&[r, c]);
                if *axis == 0 {
                    full.data_mut()[start * c..start * c + g.numel()].copy_from_slice(g.data());
                } else {
                    let len = g.cols();
                    for i in 0..r {
                        full.data_mut()[i * c + start..i * c + start + len]
                            .copy_from_slice(g.row(i));
                    }
                }
                accumulate(grads, *input, full);
            }
            Op::Mean { input, axis } => {
                let v = self.value(*input);
                let (r, c) = (v.rows(), v.cols());
                let mut full = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    for j in 0..c {
                        let gv = if *axis == 0 {
                            g.data()[j] / r as f64
                        } else {
                            g.data()[i] / c as f64
                        };
                        full.set(i, j, gv);
                    }
                }
                accumulate(grads, *input, full);
            }
            Op::Sum(input) => {
                let v = self.value(*input);
                accumulate(grads, *input, Tensor::full(v.shape(), g.data()[0]));
            }
            Op::Relu(input) => {
                let gi = g
                    .zip_with("relu", self.value(*input), |gv, x| if x > 0.0 { gv } else { 0.0 })
                    .expect("shapes");
                accumulate(grads, *input, gi);
            }
            Op::Sigmoid(input) => {
                let gi = g.zip_with("sigmoid", out, |gv, y| gv * y * (1.0 - y)).expect("shapes");
                accumulate(grads, *input, gi);
            }
            Op::Tanh(input) => {
                let gi = g.zip_with("tanh", out, |gv, y| gv * (1.0 - y * y)).expect("shapes");
                accumulate(grads, *input, gi);
            }
            Op::Dropout { input, mask } => {
                let gi = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(mask).map(|(x, m)| x * m).collect(),
                )
                .expect("shapes");
                accumulate(grads, *input, gi);
            }
            Op::SquaredError(a, b) => {
                let s = 2.0 * g.data()[0];
                let diff = self.value(*a).sub(self.value(*b)).expect("shapes").scale(s);
                accumulate(grads, *b, diff.scale(-1.0));
                accumulate(grads, *a, diff);
            }
            Op::Transpose(input) => accumulate(grads, *input, g.transpose()),
            Op::Pinv(input) => {
                let gm = pinv_backward(self.value(*input), out, g);
                accumulate(grads, *input, gm);
            }
        }
    }

    /// Gradients for every parameter bound into this graph, keyed by name.
    /// Parameters with no path to the loss get zeros.
    pub fn param_grads(&self, grads: &Gradients) -> Grads {
        self.params
            .iter()
            .map(|(name, &id)| {
                let g = grads
                    .get(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.value(id).shape()));
                (name.clone(), g)
            })
            .collect()
    }

    pub fn param_node(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Adjoint of `P = M†` for an upstream gradient `Ḡ` (shape of `P`):
///
/// `M̄ = −Pᵀ Ḡ Pᵀ + (I − M P) Ḡᵀ P Pᵀ + Pᵀ P Ḡᵀ (I − P M)`
fn pinv_backward(m: &Tensor, p: &Tensor, g: &Tensor) -> Tensor {
    let (d, n) = (m.rows(), m.cols());
    let pt = p.transpose();
    let gt = g.transpose();

    let mut out = pt.matmul(g).and_then(|x| x.matmul(&pt)).expect("pinv shapes").scale(-1.0);

    // (I − M P) Ḡᵀ P Pᵀ
    let mp = m.matmul(p).expect("pinv shapes");
    let left = Tensor::eye(d).sub(&mp).expect("pinv shapes");
    let ppt = p.matmul(&pt).expect("pinv shapes");
    let term2 = left
        .matmul(&gt)
        .and_then(|x| x.matmul(&ppt))
        .expect("pinv shapes");
    out.add_assign(&term2);

    // Pᵀ P Ḡᵀ (I − P M)
    let pm = p.matmul(m).expect("pinv shapes");
    let right = Tensor::eye(n).sub(&pm).expect("pinv shapes");
    let ptp = pt.matmul(p).expect("pinv shapes");
    let term3 = ptp
        .matmul(&gt)
        .and_then(|x| x.matmul(&right))
        .expect("pinv shapes");
    out.add_assign(&term3);
    out
}
