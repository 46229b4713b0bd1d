//! Tape-based reverse-mode differentiation over [`Tensor2`] values.
//!
//! Nodes are appended in evaluation order, so the tape is already topologically
//! sorted and [`Graph::backward`] is a single reverse sweep. Parameters enter the
//! tape through [`Graph::param`]; each parameter gets at most one leaf.

use std::collections::HashMap;

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{gelu_grad, layer_norm_forward, Tensor2};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor2,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    MeanRows(Var),
    Sum(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Var, Var),
    /// Scalar whose derivative with respect to `input` was computed by the caller.
    ScalarLoss {
        input: Var,
        local_grad: Tensor2,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor2,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_leaves: HashMap<ParamId, Var>,
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

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor2, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Input)
    }

    /// Leaf for a trainable parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_leaves.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id));
        self.param_leaves.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(value, Op::MatMulNt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let value = self.value(a).add_row(self.value(bias))?;
        Ok(self.push(value, Op::AddRow(a, bias)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).softmax_rows();
        self.push(value, Op::Softmax(a))
    }

    /// `gain` and `bias` are `1 × cols` rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (value, xhat, inv_std) = layer_norm_forward(
            self.value(x),
            self.value(gain).data(),
            self.value(bias).data(),
            eps,
        )?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).gelu();
        self.push(value, Op::Gelu(a))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).mean_rows();
        self.push(value, Op::MeanRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor2::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let value = self.value(x).slice_cols(start, width);
        self.push(value, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor2> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor2::concat_cols(&values)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, top: Var, bottom: Var) -> Result<Var> {
        let value = Tensor2::concat_rows(self.value(top), self.value(bottom))?;
        Ok(self.push(value, Op::ConcatRows(top, bottom)))
    }

    /// Registers a scalar `value` whose gradient with respect to `input` is `local_grad`.
    pub fn scalar_loss(&mut self, input: Var, value: f64, local_grad: Tensor2) -> Result<Var> {
        if local_grad.shape() != self.value(input).shape() {
            return Err(Error::Shape {
                op: "scalar_loss",
                left: self.value(input).shape(),
                right: local_grad.shape(),
            });
        }
        Ok(self.push(Tensor2::scalar(value), Op::ScalarLoss { input, local_grad }))
    }

    /// Reverse sweep from a scalar root. Parameters that the root does not depend on
    /// are absent from the result.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.shape() != (1, 1) {
            return Err(Error::NonScalarRoot(root_value.shape()));
        }
        let mut grads: Vec<Option<Tensor2>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor2::scalar(1.0));
        let mut out = Gradients::default();

        for i in (0..=root.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => out.insert(*id, dy),
                Op::MatMul(a, b) => {
                    let da = dy.matmul_nt(self.value(*b))?;
                    let db = self.value(*a).matmul_tn(&dy)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulNt(a, b) => {
                    let da = dy.matmul(self.value(*b))?;
                    let db = dy.matmul_tn(self.value(*a))?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, dy.clone());
                    accumulate(&mut grads, *a, dy);
                }
                Op::AddRow(a, bias) => {
                    accumulate(&mut grads, *bias, column_sums(&dy));
                    accumulate(&mut grads, *a, dy);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, dy.scale(*s)),
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut dx = Tensor2::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, dyr) = (y.row(r), dy.row(r));
                        let inner: f64 = yr.iter().zip(dyr).map(|(p, g)| p * g).sum();
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = yr[c] * (dyr[c] - inner);
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let g = self.value(*gain).data();
                    let cols = xhat.cols();
                    let n = cols as f64;
                    let mut dx = Tensor2::zeros(xhat.rows(), cols);
                    let mut dgain = Tensor2::zeros(1, cols);
                    for r in 0..xhat.rows() {
                        let (h, dyr) = (xhat.row(r), dy.row(r));
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for c in 0..cols {
                            let dh = dyr[c] * g[c];
                            sum_dh += dh;
                            sum_dh_h += dh * h[c];
                            dgain.data_mut()[c] += dyr[c] * h[c];
                        }
                        let k = inv_std[r] / n;
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = k * (n * dyr[c] * g[c] - sum_dh - h[c] * sum_dh_h);
                        }
                    }
                    accumulate(&mut grads, *bias, column_sums(&dy));
                    accumulate(&mut grads, *gain, dgain);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut dx = dy;
                    for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
                        *d *= gelu_grad(xv);
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::MeanRows(a) => {
                    let (rows, cols) = self.value(*a).shape();
                    let mut dx = Tensor2::zeros(rows, cols);
                    let inv = 1.0 / rows as f64;
                    for r in 0..rows {
                        for (o, g) in dx.row_mut(r).iter_mut().zip(dy.data()) {
                            *o = g * inv;
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::Sum(a) => {
                    let (rows, cols) = self.value(*a).shape();
                    accumulate(&mut grads, *a, Tensor2::filled(rows, cols, dy.get(0, 0)));
                }
                Op::SliceCols { x, start } => {
                    let (rows, cols) = self.value(*x).shape();
                    let mut dx = Tensor2::zeros(rows, cols);
                    let w = dy.cols();
                    for r in 0..rows {
                        dx.row_mut(r)[*start..*start + w].copy_from_slice(dy.row(r));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        accumulate(&mut grads, p, dy.slice_cols(offset, w));
                        offset += w;
                    }
                }
                Op::ConcatRows(top, bottom) => {
                    let (top_rows, cols) = self.value(*top).shape();
                    let split = top_rows * cols;
                    let data = dy.into_data();
                    let bottom_rows = self.value(*bottom).rows();
                    accumulate(
                        &mut grads,
                        *bottom,
                        Tensor2::from_vec(bottom_rows, cols, data[split..].to_vec())?,
                    );
                    accumulate(
                        &mut grads,
                        *top,
                        Tensor2::from_vec(top_rows, cols, data[..split].to_vec())?,
                    );
                }
                Op::ScalarLoss { input, local_grad } => {
                    accumulate(&mut grads, *input, local_grad.scale(dy.get(0, 0)));
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor2>], v: Var, g: Tensor2) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums(t: &Tensor2) -> Tensor2 {
    let mut out = Tensor2::zeros(1, t.cols());
    for r in 0..t.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(t.row(r)) {
            *o += v;
        }
    }
    out
}
