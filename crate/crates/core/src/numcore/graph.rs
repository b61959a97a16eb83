//! Tape-based reverse-mode differentiation over [`Tensor`] values.

use std::collections::HashMap;

use super::params::ParamSet;
use super::tensor::{matmul, matmul_a_bt, matmul_at_b, Tensor};
use crate::error::{bail, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param { slot: usize, name: String },
    MatMul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Relu(NodeId),
    Square(NodeId),
    Sum(NodeId),
    ConcatCols(Vec<NodeId>),
    SoftmaxRows(NodeId),
    Mix { weights: NodeId, parts: Vec<NodeId> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// A recording of tensor operations. Build the forward pass through the
/// methods below, then call [`Graph::backward`] on a scalar node.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<(usize, String), NodeId>,
}

fn shape2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<NodeId> {
        if !value.all_finite() {
            bail!(Numeric, "non-finite value produced by {}", op_name(&op));
        }
        self.nodes.push(Node { value, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Record a constant (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Const)
    }

    /// Record parameter `name` of `params`. Gradients are routed to slot 0 by
    /// [`Graph::backward`].
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<NodeId> {
        self.param_in(0, params, name)
    }

    /// Record parameter `name` belonging to parameter-set `slot`; see
    /// [`Graph::backward_multi`].
    pub fn param_in(&mut self, slot: usize, params: &ParamSet, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(&(slot, name.to_string())) {
            return Ok(id);
        }
        let value = params.get(name)?.clone();
        let id = self.push(
            value,
            Op::Param {
                slot,
                name: name.to_string(),
            },
        )?;
        self.params.insert((slot, name.to_string()), id);
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, k) = shape2(self.value(a));
        let (k2, m) = shape2(self.value(b));
        if k != k2 {
            bail!(Shape, "matmul inner dims differ: {n}×{k} · {k2}×{m}");
        }
        let out = matmul(self.value(a).data(), self.value(b).data(), n, k, m);
        self.push(Tensor::matrix(n, m, out)?, Op::MatMul(a, b))
    }

    /// Add a bias row to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (n, m) = shape2(self.value(x));
        let b = self.value(bias);
        if b.len() != m {
            bail!(Shape, "bias length {} does not match {m} columns", b.len());
        }
        let mut out = self.value(x).data().to_vec();
        let bd = b.data();
        for row in out.chunks_mut(m) {
            for (o, &bv) in row.iter_mut().zip(bd) {
                *o += bv;
            }
        }
        self.push(Tensor::matrix(n, m, out)?, Op::AddRow(x, bias))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.value(a).dims() != self.value(b).dims() {
            bail!(
                Shape,
                "{what}: dims {:?} vs {:?}",
                self.value(a).dims(),
                self.value(b).dims()
            );
        }
        Ok(())
    }

    fn zip_with(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        self.same_shape(a, b, op_name(&op))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.value(a).dims().to_vec(), data)?;
        self.push(t, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let t = self.value(a).map(|v| v * c);
        self.push(t, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a).map(f64::tanh);
        self.push(t, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a).map(|v| v.max(0.0));
        self.push(t, Op::Relu(a))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a).map(|v| v * v);
        self.push(t, Op::Square(a))
    }

    /// Sum of all entries as a 1×1 tensor.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Column-wise concatenation of equally tall matrices.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            bail!(Shape, "concat of zero tensors");
        };
        let n = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = shape2(self.value(p));
            if r != n {
                bail!(Shape, "concat rows differ: {r} vs {n}");
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        self.push(
            Tensor::matrix(n, total, out)?,
            Op::ConcatCols(parts.to_vec()),
        )
    }

    /// Numerically stable softmax over each row.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, m) = shape2(self.value(a));
        let mut out = Vec::with_capacity(n * m);
        for r in 0..n {
            out.extend(softmax(self.value(a).row_slice(r)));
        }
        self.push(Tensor::matrix(n, m, out)?, Op::SoftmaxRows(a))
    }

    /// Row-wise mixture: `out[r] = Σ_i weights[r, i] · parts[i][r]`.
    pub fn mix(&mut self, weights: NodeId, parts: &[NodeId]) -> Result<NodeId> {
        let (n, k) = shape2(self.value(weights));
        if k != parts.len() || parts.is_empty() {
            bail!(Shape, "mix expects {k} parts, got {}", parts.len());
        }
        let (pn, m) = shape2(self.value(parts[0]));
        for &p in parts {
            if shape2(self.value(p)) != (pn, m) || pn != n {
                bail!(Shape, "mix parts must all be {n}×{m}");
            }
        }
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            let orow = &mut out[r * m..(r + 1) * m];
            for (i, &p) in parts.iter().enumerate() {
                let w = self.value(weights).get(r, i);
                for (o, &v) in orow.iter_mut().zip(self.value(p).row_slice(r)) {
                    *o += w * v;
                }
            }
        }
        self.push(
            Tensor::matrix(n, m, out)?,
            Op::Mix {
                weights,
                parts: parts.to_vec(),
            },
        )
    }

    /// Reverse pass from a scalar `loss`, overwriting the gradients of
    /// `params` (every gradient slot is reset first).
    pub fn backward(&self, loss: NodeId, params: &mut ParamSet) -> Result<()> {
        self.backward_multi(loss, &mut [params])
    }

    /// Reverse pass routing parameter gradients to `sets[slot]`.
    pub fn backward_multi(&self, loss: NodeId, sets: &mut [&mut ParamSet]) -> Result<()> {
        if self.value(loss).len() != 1 {
            bail!(
                Contract,
                "backward requires a scalar loss, got dims {:?}",
                self.value(loss).dims()
            );
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for s in sets.iter_mut() {
            s.zero_grads();
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Const => {}
                Op::Param { slot, name } => {
                    let Some(set) = sets.get_mut(*slot) else {
                        bail!(Contract, "no parameter set for slot {slot}");
                    };
                    set.set_grad(name, Tensor::new(node.value.dims().to_vec(), g)?)?;
                }
                Op::MatMul(a, b) => {
                    let (n, k) = shape2(self.value(*a));
                    let m = self.value(*b).cols();
                    let ga = matmul_a_bt(&g, self.value(*b).data(), n, k, m);
                    let gb = matmul_at_b(self.value(*a).data(), &g, n, k, m);
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::AddRow(x, bias) => {
                    let m = self.value(*x).cols();
                    let mut gb = vec![0.0; m];
                    for row in g.chunks(m) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    accumulate(&mut adj, *bias, gb);
                    accumulate(&mut adj, *x, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *b, g.clone());
                    accumulate(&mut adj, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *b, g.iter().map(|v| -v).collect());
                    accumulate(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(x, y)| x * y)
                        .collect();
                    let gb = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(x, y)| x * y)
                        .collect();
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Scale(a, c) => accumulate(&mut adj, *a, g.iter().map(|v| v * c).collect()),
                Op::Tanh(a) => {
                    let ga = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(gv, y)| gv * (1.0 - y * y))
                        .collect();
                    accumulate(&mut adj, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut adj, *a, ga);
                }
                Op::Square(a) => {
                    let ga = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(gv, x)| 2.0 * x * gv)
                        .collect();
                    accumulate(&mut adj, *a, ga);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    accumulate(&mut adj, *a, vec![g[0]; n]);
                }
                Op::ConcatCols(parts) => {
                    let n = node.value.rows();
                    let total = node.value.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.value(p).cols();
                        let mut gp = Vec::with_capacity(n * c);
                        for r in 0..n {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        accumulate(&mut adj, p, gp);
                        offset += c;
                    }
                }
                Op::SoftmaxRows(a) => {
                    let m = node.value.cols();
                    let mut ga = Vec::with_capacity(g.len());
                    for (grow, yrow) in g.chunks(m).zip(node.value.data().chunks(m)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                        ga.extend(grow.iter().zip(yrow).map(|(gv, y)| y * (gv - dot)));
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::Mix { weights, parts } => {
                    let (n, k) = shape2(self.value(*weights));
                    let m = node.value.cols();
                    let mut gw = vec![0.0; n * k];
                    for (i, &p) in parts.iter().enumerate() {
                        let pv = self.value(p).data();
                        let mut gp = vec![0.0; n * m];
                        for r in 0..n {
                            let w = self.value(*weights).get(r, i);
                            let mut dot = 0.0;
                            for c in 0..m {
                                let gv = g[r * m + c];
                                gp[r * m + c] = w * gv;
                                dot += gv * pv[r * m + c];
                            }
                            gw[r * k + i] = dot;
                        }
                        accumulate(&mut adj, p, gp);
                    }
                    accumulate(&mut adj, *weights, gw);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], id: NodeId, g: Vec<f64>) {
    match &mut adj[id.0] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(g) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Stable softmax of one logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Const => "constant",
        Op::Param { .. } => "parameter",
        Op::MatMul(..) => "matmul",
        Op::AddRow(..) => "add_row",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Tanh(..) => "tanh",
        Op::Relu(..) => "relu",
        Op::Square(..) => "square",
        Op::Sum(..) => "sum",
        Op::ConcatCols(..) => "concat",
        Op::SoftmaxRows(..) => "softmax",
        Op::Mix { .. } => "mix",
    }
}
