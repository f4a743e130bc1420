//! Tape-based reverse-mode differentiation over dense row-major arrays.
//!
//! The operation set is closed: exactly what the registration objective
//! needs (affine maps, scaled sine, elementwise arithmetic, column
//! concatenation, reductions and a gather through a continuous field).
//! Every node keeps its forward value; gradients are materialized lazily
//! during [`Tape::backward`] and only leaves keep them afterwards.

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::real::Real;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("node {0} does not belong to this tape")]
    ForeignNode(usize),
    #[error("sine activation needs omega > 0, got {0}")]
    InvalidOmega(f64),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

impl NodeId {
    pub fn index(self) -> usize {
        self.index
    }
}

/// First operation whose output contained NaN or infinity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NonFinite {
    pub node: usize,
    pub op: &'static str,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Affine {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        batch: usize,
        fan_in: usize,
        fan_out: usize,
    },
    Sin {
        input: NodeId,
        omega: T,
        cos: Vec<T>,
    },
    SineLayer {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        batch: usize,
        fan_in: usize,
        fan_out: usize,
        omega: T,
        cos: Vec<T>,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale {
        input: NodeId,
        factor: T,
    },
    Sum(NodeId),
    Mse(NodeId, NodeId),
    ConcatCols {
        inputs: Vec<NodeId>,
        widths: Vec<usize>,
        rows: usize,
    },
    Gather {
        points: NodeId,
        spatial_grad: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Affine { .. } => "affine",
            Op::Sin { .. } => "sin_activation",
            Op::SineLayer { .. } => "sine_layer",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale { .. } => "scale",
            Op::Sum(_) => "sum",
            Op::Mse(..) => "mse",
            Op::ConcatCols { .. } => "concat_cols",
            Op::Gather { .. } => "gather",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    grad: Option<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations. Node indices follow execution
/// order, so a reverse sweep visits every node after all of its consumers.
#[derive(Debug)]
pub struct Tape<T: Real> {
    id: u64,
    nodes: Vec<Node<T>>,
    non_finite: Option<NonFinite>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            non_finite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node. Handles issued before the call become foreign.
    pub fn clear(&mut self) {
        self.nodes = Vec::new();
        self.non_finite = None;
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    /// Trainable leaf; receives a gradient on backward.
    pub fn parameter(&mut self, value: Vec<T>, shape: &[usize]) -> Result<NodeId> {
        self.leaf(value, shape, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Vec<T>, shape: &[usize]) -> Result<NodeId> {
        self.leaf(value, shape, false)
    }

    fn leaf(&mut self, value: Vec<T>, shape: &[usize], requires_grad: bool) -> Result<NodeId> {
        if numel(shape) != value.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "leaf",
                detail: format!("{} values for shape {:?}", value.len(), shape),
            });
        }
        Ok(self.push(value, shape.to_vec(), Op::Leaf, requires_grad))
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.node(id).value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.node(id).shape
    }

    /// Scalar value of a 0-d node.
    pub fn scalar(&self, id: NodeId) -> T {
        self.node(id).value[0]
    }

    /// Gradient held by `id` after the last backward pass; zeros when the
    /// node was unreachable from the root.
    pub fn grad(&self, id: NodeId) -> Vec<T> {
        let node = self.node(id);
        node.grad
            .clone()
            .unwrap_or_else(|| vec![T::zero(); node.value.len()])
    }

    /// Moves the gradient out of the tape.
    pub fn take_grad(&mut self, id: NodeId) -> Vec<T> {
        self.check(id).expect("node belongs to this tape");
        let node = &mut self.nodes[id.index];
        node.grad
            .take()
            .unwrap_or_else(|| vec![T::zero(); node.value.len()])
    }

    pub fn non_finite(&self) -> Option<&NonFinite> {
        self.non_finite.as_ref()
    }

    fn node(&self, id: NodeId) -> &Node<T> {
        assert_eq!(id.tape, self.id, "node does not belong to this tape");
        &self.nodes[id.index]
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.tape != self.id || id.index >= self.nodes.len() {
            Err(AutodiffError::ForeignNode(id.index))
        } else {
            Ok(())
        }
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, requires_grad: bool) -> NodeId {
        let index = self.nodes.len();
        if self.non_finite.is_none() && !all_finite(&value) {
            self.non_finite = Some(NonFinite {
                node: index,
                op: op.name(),
            });
        }
        self.nodes.push(Node {
            value,
            shape,
            grad: None,
            op,
            requires_grad,
        });
        NodeId {
            tape: self.id,
            index,
        }
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&id| self.nodes[id.index].requires_grad)
    }

    /// `input · weight + bias` with `input: [B, F_in]`, `weight: [F_in, F_out]`,
    /// `bias: [F_out]`.
    pub fn affine(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        for id in [input, weight, bias] {
            self.check(id)?;
        }
        let (batch, fan_in, fan_out) = self.affine_dims("affine", input, weight, bias)?;
        let value = kernels::affine(
            self.value(input),
            self.value(weight),
            self.value(bias),
            batch,
            fan_in,
            fan_out,
        );
        let rg = self.needs(&[input, weight, bias]);
        Ok(self.push(
            value,
            vec![batch, fan_out],
            Op::Affine {
                input,
                weight,
                bias,
                batch,
                fan_in,
                fan_out,
            },
            rg,
        ))
    }

    /// `sin(omega * (input · weight + bias))` as one node. Values equal
    /// [`Tape::affine`] followed by [`Tape::sin_activation`] bit for bit; the
    /// pre-activation is never stored.
    pub fn sine_layer(&mut self, input: NodeId, weight: NodeId, bias: NodeId, omega: T) -> Result<NodeId> {
        for id in [input, weight, bias] {
            self.check(id)?;
        }
        if !(omega > T::zero()) {
            return Err(AutodiffError::InvalidOmega(omega.to_f64_lossy()));
        }
        let (batch, fan_in, fan_out) = self.affine_dims("sine_layer", input, weight, bias)?;
        let (value, cos) = kernels::sine_layer(
            self.value(input),
            self.value(weight),
            self.value(bias),
            batch,
            fan_in,
            fan_out,
            omega,
        );
        let rg = self.needs(&[input, weight, bias]);
        Ok(self.push(
            value,
            vec![batch, fan_out],
            Op::SineLayer {
                input,
                weight,
                bias,
                batch,
                fan_in,
                fan_out,
                omega,
                cos,
            },
            rg,
        ))
    }

    fn affine_dims(&self, op: &'static str, input: NodeId, weight: NodeId, bias: NodeId) -> Result<(usize, usize, usize)> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        let ok = xs.len() == 2 && ws.len() == 2 && bs.len() == 1 && xs[1] == ws[0] && ws[1] == bs[0];
        if !ok {
            return Err(AutodiffError::ShapeMismatch {
                op,
                detail: format!("input {xs:?}, weight {ws:?}, bias {bs:?}"),
            });
        }
        Ok((xs[0], ws[0], ws[1]))
    }

    /// Elementwise `sin(omega * input)`.
    pub fn sin_activation(&mut self, input: NodeId, omega: T) -> Result<NodeId> {
        self.check(input)?;
        if !(omega > T::zero()) {
            return Err(AutodiffError::InvalidOmega(omega.to_f64_lossy()));
        }
        let x = self.value(input);
        let mut sin = vec![T::zero(); x.len()];
        let mut cos = vec![T::zero(); x.len()];
        T::sin_cos_scaled(x, omega, &mut sin, &mut cos);
        let shape = self.shape(input).to_vec();
        let rg = self.needs(&[input]);
        Ok(self.push(sin, shape, Op::Sin { input, omega, cos }, rg))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<NodeId> {
        self.same_shape(op.name(), a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, shape, op, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, input: NodeId, factor: T) -> Result<NodeId> {
        self.check(input)?;
        let value = self.value(input).iter().map(|&x| x * factor).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.needs(&[input]);
        Ok(self.push(value, shape, Op::Scale { input, factor }, rg))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let total = self.value(input).iter().copied().sum::<T>();
        let rg = self.needs(&[input]);
        Ok(self.push(vec![total], Vec::new(), Op::Sum(input), rg))
    }

    /// Mean of squared elementwise differences, as a scalar.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mse", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let count = T::from_usize(va.len().max(1)).unwrap();
        let total = va
            .iter()
            .zip(vb)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>();
        let rg = self.needs(&[a, b]);
        Ok(self.push(vec![total / count], Vec::new(), Op::Mse(a, b), rg))
    }

    /// Concatenates `[B, w_i]` matrices along columns.
    pub fn concat_cols(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat_cols",
                detail: "no inputs".into(),
            });
        }
        for &id in inputs {
            self.check(id)?;
        }
        let rows = self.shape(inputs[0]).first().copied().unwrap_or(0);
        let mut widths = Vec::with_capacity(inputs.len());
        for &id in inputs {
            let s = self.shape(id);
            if s.len() != 2 || s[0] != rows {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("expected [{rows}, _], got {s:?}"),
                });
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&id, &w) in inputs.iter().zip(&widths) {
                value.extend_from_slice(&self.value(id)[r * w..(r + 1) * w]);
            }
        }
        let rg = self.needs(inputs);
        Ok(self.push(
            value,
            vec![rows, total],
            Op::ConcatCols {
                inputs: inputs.to_vec(),
                widths,
                rows,
            },
            rg,
        ))
    }

    /// Evaluates a continuous scalar field at `points: [B, 3]`.
    ///
    /// `field` returns the value and its spatial gradient at one point; the
    /// gradient is recorded so backward can route upstream gradients to the
    /// point coordinates.
    pub fn gather<F>(&mut self, points: NodeId, field: F) -> Result<NodeId>
    where
        F: Fn([T; 3]) -> (T, [T; 3]),
    {
        self.check(points)?;
        let s = self.shape(points);
        if s.len() != 2 || s[1] != 3 {
            return Err(AutodiffError::ShapeMismatch {
                op: "gather",
                detail: format!("points must be [B, 3], got {s:?}"),
            });
        }
        let batch = s[0];
        let mut value = Vec::with_capacity(batch);
        let mut spatial_grad = Vec::with_capacity(batch * 3);
        for p in self.value(points).chunks_exact(3) {
            let (v, g) = field([p[0], p[1], p[2]]);
            value.push(v);
            spatial_grad.extend_from_slice(&g);
        }
        let rg = self.needs(&[points]);
        Ok(self.push(
            value,
            vec![batch],
            Op::Gather {
                points,
                spatial_grad,
            },
            rg,
        ))
    }

    /// Populates `∂root/∂leaf` on every gradient-carrying leaf.
    ///
    /// Previous gradients are discarded first, so repeated calls on the same
    /// tape produce identical results. Leaves not reachable from `root`
    /// report zeros through [`Tape::grad`].
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        self.check(root)?;
        let shape = self.shape(root);
        if !shape.is_empty() || self.value(root).len() != 1 {
            return Err(AutodiffError::NonScalarRoot(shape.to_vec()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[root.index].grad = Some(vec![T::one()]);

        for index in (0..=root.index).rev() {
            if !self.nodes[index].requires_grad {
                continue;
            }
            if matches!(self.nodes[index].op, Op::Leaf) {
                continue;
            }
            let Some(up) = self.nodes[index].grad.take() else {
                continue;
            };
            // Move the op out while its parents are updated, then restore it.
            let op = std::mem::replace(&mut self.nodes[index].op, Op::Leaf);
            self.propagate(&op, &up);
            self.nodes[index].op = op;
        }
        Ok(())
    }

    fn with_grad(&mut self, target: NodeId, f: impl FnOnce(&mut [T], &[Node<T>])) {
        let i = target.index;
        if !self.nodes[i].requires_grad {
            return;
        }
        let len = self.nodes[i].value.len();
        let mut g = self.nodes[i]
            .grad
            .take()
            .unwrap_or_else(|| vec![T::zero(); len]);
        f(&mut g, &self.nodes);
        self.nodes[i].grad = Some(g);
    }

    fn propagate(&mut self, op: &Op<T>, up: &[T]) {
        match *op {
            Op::Leaf => {}
            Op::Affine {
                input,
                weight,
                bias,
                batch,
                fan_in,
                fan_out,
            } => self.affine_backward([input, weight, bias], [batch, fan_in, fan_out], up),
            Op::SineLayer {
                input,
                weight,
                bias,
                batch,
                fan_in,
                fan_out,
                omega,
                ref cos,
            } => {
                let gz: Vec<T> = up.iter().zip(cos).map(|(&u, &c)| u * omega * c).collect();
                self.affine_backward([input, weight, bias], [batch, fan_in, fan_out], &gz);
            }
            Op::Sin {
                input,
                omega,
                ref cos,
            } => {
                self.with_grad(input, |g, _| {
                    for ((gi, &u), &c) in g.iter_mut().zip(up).zip(cos) {
                        *gi = *gi + u * omega * c;
                    }
                });
            }
            Op::Add(a, b) => {
                for t in [a, b] {
                    self.with_grad(t, |g, _| add_into(g, up));
                }
            }
            Op::Sub(a, b) => {
                self.with_grad(a, |g, _| add_into(g, up));
                self.with_grad(b, |g, _| {
                    for (gi, &u) in g.iter_mut().zip(up) {
                        *gi = *gi - u;
                    }
                });
            }
            Op::Mul(a, b) => {
                for (t, other) in [(a, b), (b, a)] {
                    self.with_grad(t, |g, nodes| {
                        let o = &nodes[other.index].value;
                        for ((gi, &u), &v) in g.iter_mut().zip(up).zip(o) {
                            *gi = *gi + u * v;
                        }
                    });
                }
            }
            Op::Scale { input, factor } => {
                self.with_grad(input, |g, _| {
                    for (gi, &u) in g.iter_mut().zip(up) {
                        *gi = *gi + u * factor;
                    }
                });
            }
            Op::Sum(input) => {
                let u = up[0];
                self.with_grad(input, |g, _| {
                    for gi in g.iter_mut() {
                        *gi = *gi + u;
                    }
                });
            }
            Op::Mse(a, b) => {
                let count = T::from_usize(self.nodes[a.index].value.len().max(1)).unwrap();
                let coef = (T::one() + T::one()) * up[0] / count;
                for (t, sign) in [(a, T::one()), (b, -T::one())] {
                    self.with_grad(t, |g, nodes| {
                        let (va, vb) = (&nodes[a.index].value, &nodes[b.index].value);
                        for ((gi, &x), &y) in g.iter_mut().zip(va).zip(vb) {
                            *gi = *gi + sign * coef * (x - y);
                        }
                    });
                }
            }
            Op::ConcatCols {
                ref inputs,
                ref widths,
                rows,
            } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&id, &w) in inputs.iter().zip(widths) {
                    self.with_grad(id, |g, _| {
                        for r in 0..rows {
                            let src = &up[r * total + offset..r * total + offset + w];
                            add_into(&mut g[r * w..(r + 1) * w], src);
                        }
                    });
                    offset += w;
                }
            }
            Op::Gather {
                points,
                ref spatial_grad,
            } => {
                self.with_grad(points, |g, _| {
                    for ((gp, sg), &u) in g
                        .chunks_exact_mut(3)
                        .zip(spatial_grad.chunks_exact(3))
                        .zip(up)
                    {
                        for d in 0..3 {
                            gp[d] = gp[d] + u * sg[d];
                        }
                    }
                });
            }
        }
    }
}

impl<T: Real> Tape<T> {
    fn affine_backward(&mut self, [input, weight, bias]: [NodeId; 3], [batch, fan_in, fan_out]: [usize; 3], up: &[T]) {
        // dX += G · Wᵀ
        self.with_grad(input, |g, nodes| {
            let w = &nodes[weight.index].value;
            T::gemm(batch, fan_out, fan_in, up, false, w, true, T::one(), g);
        });
        // dW += Xᵀ · G
        self.with_grad(weight, |g, nodes| {
            let x = &nodes[input.index].value;
            T::gemm(fan_in, batch, fan_out, x, true, up, false, T::one(), g);
        });
        self.with_grad(bias, |g, _| {
            for row in up.chunks_exact(fan_out) {
                for (gb, &u) in g.iter_mut().zip(row) {
                    *gb = *gb + u;
                }
            }
        });
    }
}

/// `v - v` is zero exactly for finite `v`; lane-wise sums keep the loop
/// branch free.
fn all_finite<T: Real>(values: &[T]) -> bool {
    let mut acc = [T::zero(); 16];
    let mut chunks = values.chunks_exact(16);
    for ch in &mut chunks {
        for (a, &v) in acc.iter_mut().zip(ch) {
            *a = *a + (v - v);
        }
    }
    acc.iter().all(|&a| a == T::zero()) && chunks.remainder().iter().all(|v| v.is_finite())
}

fn add_into<T: Real>(g: &mut [T], up: &[T]) {
    for (gi, &u) in g.iter_mut().zip(up) {
        *gi = *gi + u;
    }
}

/// Forward kernels shared with tape-free evaluation, so that a model
/// evaluated on or off a tape produces bit-identical values.
pub(crate) mod kernels {
    use crate::real::Real;

    pub fn affine<T: Real>(
        x: &[T],
        w: &[T],
        b: &[T],
        batch: usize,
        fan_in: usize,
        fan_out: usize,
    ) -> Vec<T> {
        let mut out = Vec::with_capacity(batch * fan_out);
        for _ in 0..batch {
            out.extend_from_slice(b);
        }
        T::gemm(batch, fan_in, fan_out, x, false, w, false, T::one(), &mut out);
        out
    }

    /// `(sin, cos)` of `omega * affine(..)`, converting the pre-activation
    /// in cache-sized blocks.
    #[allow(clippy::too_many_arguments)]
    pub fn sine_layer<T: Real>(
        x: &[T],
        w: &[T],
        b: &[T],
        batch: usize,
        fan_in: usize,
        fan_out: usize,
        omega: T,
    ) -> (Vec<T>, Vec<T>) {
        const BLOCK: usize = 2048;
        let mut s = affine(x, w, b, batch, fan_in, fan_out);
        let mut c = vec![T::zero(); s.len()];
        let mut z = vec![T::zero(); BLOCK.min(s.len())];
        for (sb, cb) in s.chunks_mut(BLOCK).zip(c.chunks_mut(BLOCK)) {
            let z = &mut z[..sb.len()];
            z.copy_from_slice(sb);
            T::sin_cos_scaled(z, omega, sb, cb);
        }
        (s, c)
    }
}
