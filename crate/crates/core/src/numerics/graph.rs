//! Recorded-tape reverse-mode differentiation over [`Tensor`] primitives.
//!
//! Values are computed eagerly as nodes are appended, so the tape doubles as
//! the forward pass. Creation order is a topological order (an input must
//! exist before it is used), which makes reverse accumulation a single
//! backward sweep over the node list.

use crate::error::{Error, Result};
use crate::numerics::tensor::{gelu_grad_scalar, mean_var, Tensor};

/// Handle into a [`Graph`]'s node list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    MulElem(NodeId, NodeId),
    Scale(NodeId, f64),
    AddRowBroadcast(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Concat { parts: Vec<NodeId>, axis: usize },
    Row(NodeId, usize),
    SoftmaxRows(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    Relu(NodeId),
    Gelu(NodeId),
    SumAll(NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Ordered record of primitive applications; replaying the forward pass from
/// the recorded leaf values reproduces every recorded output exactly.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Graph::backward`]. Only leaves that
/// participate in the output (and need gradients) have entries; everything
/// else reads back as `None`, which callers may treat as an exact zero.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }

    /// Gradient as a dense tensor, zeros when the output never touched `id`.
    pub fn dense(&self, graph: &Graph, id: NodeId) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(graph.value(id).shape().to_vec()),
        }
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
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

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// Introduces an input tensor. `needs_grad` marks it as a differentiation
    /// target; gradients never accumulate into (or propagate past) nodes whose
    /// inputs are all frozen.
    pub fn leaf(&mut self, value: Tensor, needs_grad: bool) -> NodeId {
        self.push(Op::Leaf, value, needs_grad)
    }

    /// A frozen leaf.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::Matmul(a, b), v, self.any_needs(&[a, b])))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v, self.any_needs(&[a, b])))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), v, self.any_needs(&[a, b])))
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul_elem(self.value(b))?;
        Ok(self.push(Op::MulElem(a, b), v, self.any_needs(&[a, b])))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        if !c.is_finite() {
            return Err(Error::NonFinite(format!("scale factor {c}")));
        }
        let v = self.value(a).scale(c);
        Ok(self.push(Op::Scale(a, c), v, self.nodes[a.0].needs_grad))
    }

    /// Adds a 1×D bias row to every row of a t×D matrix.
    pub fn add_row_broadcast(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = self.value(x).add_row_broadcast(self.value(bias))?;
        Ok(self.push(
            Op::AddRowBroadcast(x, bias),
            v,
            self.any_needs(&[x, bias]),
        ))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).transpose()?;
        Ok(self.push(Op::Transpose(a), v, self.nodes[a.0].needs_grad))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(Op::Reshape(a), v, self.nodes[a.0].needs_grad))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.concat(parts, 0)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.concat(parts, 1)
    }

    fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let tensors: Vec<&Tensor> = parts.iter().map(|id| self.value(*id)).collect();
        let v = Tensor::concat(&tensors, axis)?;
        let needs = self.any_needs(parts);
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            v,
            needs,
        ))
    }

    /// Extracts row `r` of a 2-D node as a 1×C tensor.
    pub fn row(&mut self, a: NodeId, r: usize) -> Result<NodeId> {
        let t = self.value(a);
        if t.shape().len() != 2 || r >= t.shape()[0] {
            return Err(Error::shape(format!(
                "row: index {r} out of range for {:?}",
                t.shape()
            )));
        }
        let v = Tensor::from_parts(vec![1, t.cols()], t.row(r).to_vec());
        Ok(self.push(Op::Row(a, r), v, self.nodes[a.0].needs_grad))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).softmax_rows()?;
        Ok(self.push(Op::SoftmaxRows(a), v, self.nodes[a.0].needs_grad))
    }

    /// Fused LayerNorm with affine parameters (1×D `gamma` and `beta`).
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let v = self
            .value(x)
            .layer_norm(self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            Op::LayerNorm { x, gamma, beta, eps },
            v,
            self.any_needs(&[x, gamma, beta]),
        ))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).relu();
        Ok(self.push(Op::Relu(a), v, self.nodes[a.0].needs_grad))
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).gelu();
        Ok(self.push(Op::Gelu(a), v, self.nodes[a.0].needs_grad))
    }

    /// Sum of all elements, as a 1×1 tensor.
    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).sum_all());
        Ok(self.push(Op::SumAll(a), v, self.nodes[a.0].needs_grad))
    }

    /// Recomputes every non-leaf value from its recorded inputs and demands
    /// bitwise equality with the recorded output.
    pub fn replay_check(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            let recomputed = match node.op {
                Op::Leaf => continue,
                Op::Matmul(a, b) => self.value(a).matmul(self.value(b))?,
                Op::Add(a, b) => self.value(a).add(self.value(b))?,
                Op::Sub(a, b) => self.value(a).sub(self.value(b))?,
                Op::MulElem(a, b) => self.value(a).mul_elem(self.value(b))?,
                Op::Scale(a, c) => self.value(a).scale(c),
                Op::AddRowBroadcast(x, bias) => {
                    self.value(x).add_row_broadcast(self.value(bias))?
                }
                Op::Transpose(a) => self.value(a).transpose()?,
                Op::Reshape(a) => self.value(a).reshape(node.value.shape().to_vec())?,
                Op::Concat { ref parts, axis } => {
                    let tensors: Vec<&Tensor> = parts.iter().map(|id| self.value(*id)).collect();
                    Tensor::concat(&tensors, axis)?
                }
                Op::Row(a, r) => {
                    Tensor::from_parts(vec![1, self.value(a).cols()], self.value(a).row(r).to_vec())
                }
                Op::SoftmaxRows(a) => self.value(a).softmax_rows()?,
                Op::LayerNorm { x, gamma, beta, eps } => {
                    self.value(x)
                        .layer_norm(self.value(gamma), self.value(beta), eps)?
                }
                Op::Relu(a) => self.value(a).relu(),
                Op::Gelu(a) => self.value(a).gelu(),
                Op::SumAll(a) => Tensor::scalar(self.value(a).sum_all()),
            };
            if recomputed != node.value {
                return Err(Error::Graph(format!(
                    "replay mismatch at node {i}: recorded value differs from recomputation"
                )));
            }
        }
        Ok(())
    }

    /// Reverse accumulation from a scalar output seeded with 1.
    pub fn backward(&self, out: NodeId) -> Result<Gradients> {
        self.backward_seeded(out, Tensor::scalar(1.0))
    }

    /// [`Graph::backward`] preceded by a full replay check, so silent forward
    /// corruption surfaces as a graph error instead of a wrong gradient.
    pub fn backward_checked(&self, out: NodeId) -> Result<Gradients> {
        self.replay_check()?;
        self.backward(out)
    }

    /// Reverse accumulation with an explicit seed (same shape as the output).
    pub fn backward_seeded(&self, out: NodeId, seed: Tensor) -> Result<Gradients> {
        if out.0 >= self.nodes.len() {
            return Err(Error::Graph(format!("backward: node {} out of range", out.0)));
        }
        if seed.shape() != self.value(out).shape() {
            return Err(Error::shape(format!(
                "backward: seed shape {:?} vs output {:?}",
                seed.shape(),
                self.value(out).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[out.0].needs_grad {
            grads[out.0] = Some(seed);
        }
        for i in (0..=out.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue; // leaf gradients stay in place for reporting
            }
            let Some(g) = grads[i].take() else { continue };
            self.apply_vjp(i, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    /// Routes the output cotangent `g` of node `i` into its inputs.
    fn apply_vjp(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let accum = |grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor| -> Result<()> {
            if !self.nodes[id.0].needs_grad {
                return Ok(());
            }
            match &mut grads[id.0] {
                Some(existing) => *existing = existing.add(&delta)?,
                slot @ None => *slot = Some(delta),
            }
            Ok(())
        };
        match self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    accum(grads, a, g.matmul_nt(self.value(b))?)?;
                }
                if self.nodes[b.0].needs_grad {
                    accum(grads, b, self.value(a).matmul_tn(g)?)?;
                }
            }
            Op::Add(a, b) => {
                accum(grads, a, g.clone())?;
                accum(grads, b, g.clone())?;
            }
            Op::Sub(a, b) => {
                accum(grads, a, g.clone())?;
                accum(grads, b, g.scale(-1.0))?;
            }
            Op::MulElem(a, b) => {
                if self.nodes[a.0].needs_grad {
                    accum(grads, a, g.mul_elem(self.value(b))?)?;
                }
                if self.nodes[b.0].needs_grad {
                    accum(grads, b, g.mul_elem(self.value(a))?)?;
                }
            }
            Op::Scale(a, c) => {
                accum(grads, a, g.scale(c))?;
            }
            Op::AddRowBroadcast(x, bias) => {
                accum(grads, x, g.clone())?;
                if self.nodes[bias.0].needs_grad {
                    let (m, n) = (g.rows(), g.cols());
                    let mut col_sum = vec![0.0; n];
                    for r in 0..m {
                        for (s, &v) in col_sum.iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    accum(
                        grads,
                        bias,
                        Tensor::from_parts(self.value(bias).shape().to_vec(), col_sum),
                    )?;
                }
            }
            Op::Transpose(a) => {
                accum(grads, a, g.transpose()?)?;
            }
            Op::Reshape(a) => {
                accum(grads, a, g.reshape(self.value(a).shape().to_vec())?)?;
            }
            Op::Concat { ref parts, axis } => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let (pr, pc) = (pv.rows(), pv.cols());
                    if self.nodes[p.0].needs_grad {
                        let mut piece = Tensor::zeros(vec![pr, pc]);
                        for r in 0..pr {
                            for c in 0..pc {
                                let src = if axis == 0 {
                                    (offset + r) * g.cols() + c
                                } else {
                                    r * g.cols() + offset + c
                                };
                                piece.data_mut()[r * pc + c] = g.data()[src];
                            }
                        }
                        accum(grads, p, piece)?;
                    }
                    offset += if axis == 0 { pr } else { pc };
                }
            }
            Op::Row(a, r) => {
                if self.nodes[a.0].needs_grad {
                    let av = self.value(a);
                    let mut d = Tensor::zeros(av.shape().to_vec());
                    let c = av.cols();
                    d.data_mut()[r * c..(r + 1) * c].copy_from_slice(g.data());
                    accum(grads, a, d)?;
                }
            }
            Op::SoftmaxRows(a) => {
                if self.nodes[a.0].needs_grad {
                    // d/dx softmax: s ∘ (g − ⟨g, s⟩) per row
                    let s = &self.nodes[i].value;
                    let (m, n) = (s.rows(), s.cols());
                    let mut d = vec![0.0; m * n];
                    for r in 0..m {
                        let srow = s.row(r);
                        let grow = &g.data()[r * n..(r + 1) * n];
                        let dot: f64 = srow.iter().zip(grow).map(|(&sv, &gv)| sv * gv).sum();
                        for j in 0..n {
                            d[r * n + j] = srow[j] * (grow[j] - dot);
                        }
                    }
                    accum(grads, a, Tensor::from_parts(vec![m, n], d))?;
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = self.value(x);
                let gv = self.value(gamma);
                let (m, n) = (xv.rows(), xv.cols());
                let mut dx = if self.nodes[x.0].needs_grad {
                    Some(vec![0.0; m * n])
                } else {
                    None
                };
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for r in 0..m {
                    let xrow = xv.row(r);
                    let grow = &g.data()[r * n..(r + 1) * n];
                    let (mean, var) = mean_var(xrow);
                    let inv = 1.0 / (var + eps).sqrt();
                    // x̂ and h = γ ∘ g for this row
                    let mut mean_h = 0.0;
                    let mut mean_hx = 0.0;
                    let mut xhat = vec![0.0; n];
                    let mut h = vec![0.0; n];
                    for j in 0..n {
                        xhat[j] = (xrow[j] - mean) * inv;
                        h[j] = gv.data()[j] * grow[j];
                        mean_h += h[j];
                        mean_hx += h[j] * xhat[j];
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                    }
                    mean_h /= n as f64;
                    mean_hx /= n as f64;
                    if let Some(dx) = dx.as_mut() {
                        for j in 0..n {
                            dx[r * n + j] = inv * (h[j] - mean_h - xhat[j] * mean_hx);
                        }
                    }
                }
                if let Some(dx) = dx {
                    accum(grads, x, Tensor::from_parts(vec![m, n], dx))?;
                }
                if self.nodes[gamma.0].needs_grad {
                    accum(
                        grads,
                        gamma,
                        Tensor::from_parts(gv.shape().to_vec(), dgamma),
                    )?;
                }
                if self.nodes[beta.0].needs_grad {
                    accum(
                        grads,
                        beta,
                        Tensor::from_parts(self.value(beta).shape().to_vec(), dbeta),
                    )?;
                }
            }
            Op::Relu(a) => {
                if self.nodes[a.0].needs_grad {
                    let av = self.value(a);
                    let d: Vec<f64> = av
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &gv)| if x > 0.0 { gv } else { 0.0 })
                        .collect();
                    accum(grads, a, Tensor::from_parts(av.shape().to_vec(), d))?;
                }
            }
            Op::Gelu(a) => {
                if self.nodes[a.0].needs_grad {
                    let av = self.value(a);
                    let d: Vec<f64> = av
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &gv)| gv * gelu_grad_scalar(x))
                        .collect();
                    accum(grads, a, Tensor::from_parts(av.shape().to_vec(), d))?;
                }
            }
            Op::SumAll(a) => {
                let av = self.value(a);
                accum(
                    grads,
                    a,
                    Tensor::filled(av.shape().to_vec(), g.data()[0]),
                )?;
            }
        }
        Ok(())
    }

    /// Test hook: corrupts a recorded value so replay mismatch is exercisable.
    #[cfg(test)]
    pub(crate) fn tamper(&mut self, id: NodeId, idx: usize, v: f64) {
        self.nodes[id.0].value.data_mut()[idx] = v;
    }
}
