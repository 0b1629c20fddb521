//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only tape. Every operation takes plain
//! [`Tensor`]s; when at least one input is tracked (produced by this graph),
//! the result is recorded as a node and comes back tracked as well. Ops on
//! untracked inputs only compute values, so the same model code serves both
//! inference and training.
//!
//! Node `i` only ever has parents with index `< i`, so [`Graph::backward`]
//! is a single reverse sweep with gradient accumulation in node order.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{dim_err, Error, Result};
use crate::kernels::{self, Bcast, View};
use crate::tensor::{count_macs, Tensor};

static NEXT_TAG: AtomicU64 = AtomicU64::new(1);

/// Identifies a node of one particular graph (and graph generation).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId {
    tag: u64,
    index: usize,
}

impl NodeId {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul,
    Binary(BinaryOp),
    Activation(Activation),
    Concat { axis: usize },
    PadFront { axis: usize, count: usize },
    Slice { axis: usize, start: usize },
    Reduce { op: Reduction, axis: usize },
    Reshape,
    Permute { order: Vec<usize> },
    SlidingMatMul { width: usize, count: usize },
}

impl Op {
    /// Contribution of the op to a propagation path. Pure data movement
    /// (reshape, permute, padding, slicing, concatenation) is free.
    fn path_weight(&self) -> usize {
        match self {
            Op::Leaf
            | Op::Concat { .. }
            | Op::PadFront { .. }
            | Op::Slice { .. }
            | Op::Reshape
            | Op::Permute { .. } => 0,
            Op::MatMul
            | Op::Binary(_)
            | Op::Activation(_)
            | Op::Reduce { .. }
            | Op::SlidingMatMul { .. } => 1,
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<Tensor>,
    parents: Vec<Option<usize>>,
    /// Forward value; kept for rules that need it (activations).
    output: Tensor,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    tag: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `t`, if `t` is a tracked leaf of
    /// the graph the gradients came from.
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        let id = t.node()?;
        if id.tag != self.tag {
            return None;
        }
        self.grads.get(id.index)?.as_ref()
    }

    /// Gradient or zeros of `t`'s shape (leaf not reached from the root).
    pub fn get_or_zeros(&self, t: &Tensor) -> Tensor {
        self.get(t).cloned().unwrap_or_else(|| Tensor::zeros_like(t))
    }

    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct Graph {
    tag: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            tag: NEXT_TAG.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all nodes. Tensors tracked before the reset are no longer
    /// recognised by this graph.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.tag = NEXT_TAG.fetch_add(1, Ordering::Relaxed);
    }

    /// Registers `t` as a differentiable leaf and returns the tracked copy.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        let out = t.detach();
        self.push(Op::Leaf, Vec::new(), Vec::new(), out)
    }

    fn parent_of(&self, t: &Tensor) -> Result<Option<usize>> {
        match t.node() {
            None => Ok(None),
            Some(id) if id.tag == self.tag && id.index < self.nodes.len() => Ok(Some(id.index)),
            Some(id) => Err(Error::Contract(format!(
                "tensor is tracked by another graph (node {})",
                id.index
            ))),
        }
    }

    fn push(&mut self, op: Op, inputs: Vec<Tensor>, parents: Vec<Option<usize>>, out: Tensor) -> Tensor {
        let id = NodeId { tag: self.tag, index: self.nodes.len() };
        let inputs = inputs.iter().map(Tensor::detach).collect();
        self.nodes.push(Node { op, inputs, parents, output: out.detach() });
        out.with_node(id)
    }

    /// Records `out` when any input is tracked; otherwise returns it as is.
    fn record(&mut self, op: Op, inputs: &[&Tensor], out: Tensor) -> Result<Tensor> {
        let parents = inputs
            .iter()
            .map(|t| self.parent_of(t))
            .collect::<Result<Vec<_>>>()?;
        if parents.iter().all(Option::is_none) {
            return Ok(out);
        }
        let inputs = inputs.iter().map(|t| (*t).clone()).collect();
        Ok(self.push(op, inputs, parents, out))
    }

    /// Matrix product. `b` is `k x n` and `a` is `[.., m, k]` (leading axes
    /// are folded into rows), or both are batched: `a: [g, m, k]`, `b: [g, k, n]`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let out = matmul_forward(a, b)?;
        self.record(Op::MatMul, &[a, b], out)
    }

    pub fn binary(&mut self, op: BinaryOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let shape = kernels::broadcast_shape(a.shape(), b.shape())?;
        let ia = Bcast::new(&shape, a.shape());
        let ib = Bcast::new(&shape, b.shape());
        let n: usize = shape.iter().product();
        let (da, db) = (a.data(), b.data());
        let data = match op {
            BinaryOp::Add => kernels::zip_broadcast(n, &ia, da, &ib, db, |x, y| x + y),
            BinaryOp::Sub => kernels::zip_broadcast(n, &ia, da, &ib, db, |x, y| x - y),
            BinaryOp::Mul => kernels::zip_broadcast(n, &ia, da, &ib, db, |x, y| x * y),
        };
        let out = Tensor::from_parts(shape, data);
        self.record(Op::Binary(op), &[a, b], out)
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn activation(&mut self, op: Activation, a: &Tensor) -> Result<Tensor> {
        let data = match op {
            Activation::Sigmoid => a.data().iter().map(|&x| kernels::sigmoid(x)).collect(),
            Activation::Tanh => a.data().iter().map(|x| x.tanh()).collect(),
        };
        let out = Tensor::from_parts(a.shape().to_vec(), data);
        self.record(Op::Activation(op), &[a], out)
    }

    pub fn sigmoid(&mut self, a: &Tensor) -> Result<Tensor> {
        self.activation(Activation::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: &Tensor) -> Result<Tensor> {
        self.activation(Activation::Tanh, a)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, axis: usize, parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(dim_err(format!("concat axis {axis} out of range for rank {rank}")));
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for p in parts {
            let same_rest = p.rank() == rank
                && (0..rank).all(|i| i == axis || p.shape()[i] == first.shape()[i]);
            if !same_rest {
                return Err(dim_err(format!(
                    "concat along axis {axis}: {:?} does not match {:?}",
                    p.shape(),
                    first.shape()
                )));
            }
            shape[axis] += p.shape()[axis];
        }
        let (outer, _, inner) = kernels::split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let span = p.shape()[axis] * inner;
                data.extend_from_slice(&p.data()[o * span..(o + 1) * span]);
            }
        }
        let out = Tensor::from_parts(shape, data);
        let refs: Vec<&Tensor> = parts.iter().collect();
        self.record(Op::Concat { axis }, &refs, out)
    }

    /// Prepends `count` zero rows along the length axis: axis 0 for vectors,
    /// otherwise the second-to-last axis (`[.., L, c]`).
    pub fn pad_front(&mut self, a: &Tensor, count: usize) -> Result<Tensor> {
        let axis = length_axis(a)?;
        let mut shape = a.shape().to_vec();
        shape[axis] += count;
        let (outer, len, inner) = kernels::split_axis(a.shape(), axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            data.resize(data.len() + count * inner, 0.0);
            data.extend_from_slice(&a.data()[o * len * inner..(o + 1) * len * inner]);
        }
        let out = Tensor::from_parts(shape, data);
        self.record(Op::PadFront { axis, count }, &[a], out)
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        if axis >= a.rank() || start > end || end > a.shape()[axis] {
            return Err(dim_err(format!(
                "slice {start}..{end} on axis {axis} of {:?}",
                a.shape()
            )));
        }
        let (outer, len, inner) = kernels::split_axis(a.shape(), axis);
        let mut shape = a.shape().to_vec();
        shape[axis] = end - start;
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&a.data()[base + start * inner..base + end * inner]);
        }
        let out = Tensor::from_parts(shape, data);
        self.record(Op::Slice { axis, start }, &[a], out)
    }

    /// Sum or mean along `axis`; the axis is removed from the shape.
    pub fn reduce(&mut self, op: Reduction, a: &Tensor, axis: usize) -> Result<Tensor> {
        if axis >= a.rank() {
            return Err(dim_err(format!("reduce axis {axis} out of range for {:?}", a.shape())));
        }
        let (outer, len, inner) = kernels::split_axis(a.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut data[o * inner..(o + 1) * inner];
            for r in 0..len {
                let src = &a.data()[(o * len + r) * inner..(o * len + r + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if op == Reduction::Mean && len > 0 {
            let scale = 1.0 / len as f64;
            data.iter_mut().for_each(|v| *v *= scale);
        }
        let mut shape = a.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::from_parts(shape, data);
        self.record(Op::Reduce { op, axis }, &[a], out)
    }

    pub fn sum(&mut self, a: &Tensor, axis: usize) -> Result<Tensor> {
        self.reduce(Reduction::Sum, a, axis)
    }

    pub fn mean(&mut self, a: &Tensor, axis: usize) -> Result<Tensor> {
        self.reduce(Reduction::Mean, a, axis)
    }

    /// Sum of all elements as a scalar.
    pub fn sum_all(&mut self, a: &Tensor) -> Result<Tensor> {
        let flat = self.reshape(a, &[a.len()])?;
        self.sum(&flat, 0)
    }

    /// Mean of all elements as a scalar.
    pub fn mean_all(&mut self, a: &Tensor) -> Result<Tensor> {
        let flat = self.reshape(a, &[a.len()])?;
        self.mean(&flat, 0)
    }

    pub fn reshape(&mut self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let out = a.reshaped(shape)?;
        self.record(Op::Reshape, &[a], out)
    }

    /// Reorders axes: output axis `i` is input axis `order[i]`.
    pub fn permute(&mut self, a: &Tensor, order: &[usize]) -> Result<Tensor> {
        let mut seen = vec![false; a.rank()];
        let valid = order.len() == a.rank()
            && order.iter().all(|&o| o < seen.len() && !std::mem::replace(&mut seen[o], true));
        if !valid {
            return Err(dim_err(format!(
                "{order:?} is not a permutation of the axes of {:?}",
                a.shape()
            )));
        }
        let (shape, data) = kernels::permute(a.data(), a.shape(), order);
        let out = Tensor::from_parts(shape, data);
        self.record(Op::Permute { order: order.to_vec() }, &[a], out)
    }

    /// Transpose of a matrix.
    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        self.permute(a, &[1, 0])
    }

    /// Linear map over sliding windows along the length axis.
    ///
    /// For `a: [.., S, c]` and `w: [d, width*c]`, returns `[.., count, d]`
    /// with row `t` equal to `w * flatten(a[.., t..t+width, :])` (timestep
    /// major, channels within a timestep).
    pub fn sliding_matmul(&mut self, a: &Tensor, w: &Tensor, width: usize, count: usize) -> Result<Tensor> {
        let (seqs, len, c) = seq_dims(a)?;
        if w.rank() != 2 || w.shape()[1] != width * c {
            return Err(dim_err(format!(
                "sliding weight {:?} does not match window {width} x {c} channels",
                w.shape()
            )));
        }
        if width == 0 || count + width - 1 > len {
            return Err(dim_err(format!(
                "{count} windows of width {width} do not fit a length-{len} sequence"
            )));
        }
        let d = w.shape()[0];
        let mut data = vec![0.0; seqs * count * d];
        kernels::sliding_gemm(a.data(), seqs, len, c, w.data(), d, width, count, &mut data);
        count_macs((seqs * count * width * c * d) as u64);
        let mut shape = a.shape()[..a.rank().saturating_sub(2)].to_vec();
        shape.extend([count, d]);
        let out = Tensor::from_parts(shape, data);
        self.record(Op::SlidingMatMul { width, count }, &[a, w], out)
    }

    /// Longest path from `from` to `to`, counting only compute ops (see
    /// the op weights: data movement is free). `None` if `to` is not
    /// reachable from `from`.
    pub fn path_depth(&self, from: &Tensor, to: &Tensor) -> Result<Option<usize>> {
        let src = self
            .parent_of(from)?
            .ok_or_else(|| Error::Contract("path source is not tracked".into()))?;
        let dst = self
            .parent_of(to)?
            .ok_or_else(|| Error::Contract("path target is not tracked".into()))?;
        let mut depth: Vec<Option<usize>> = vec![None; dst + 1];
        depth[src] = Some(0);
        for i in src + 1..=dst {
            let node = &self.nodes[i];
            let best = node
                .parents
                .iter()
                .flatten()
                .filter_map(|&p| depth[p])
                .max();
            depth[i] = best.map(|b| b + node.op.path_weight());
        }
        Ok(depth[dst])
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: &Tensor) -> Result<Gradients> {
        if root.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root.shape()
            )));
        }
        let r = self
            .parent_of(root)?
            .ok_or_else(|| Error::Contract("backward root is not tracked".into()))?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; r + 1];
        grads[r] = Some(vec![1.0]);
        let mut out: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for i in (0..=r).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                out[i] = Some(Tensor::from_parts(node.output.shape().to_vec(), g));
                continue;
            }
            let wanted: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let input_grads = node_backward(node, &g, &wanted)?;
            for ((parent, ig), want) in node.parents.iter().zip(input_grads).zip(wanted) {
                let (Some(p), true) = (parent, want) else { continue };
                let ig = ig.expect("gradient requested for tracked parent");
                match &mut grads[*p] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(Gradients { tag: self.tag, grads: out })
    }
}

fn length_axis(a: &Tensor) -> Result<usize> {
    match a.rank() {
        0 => Err(dim_err("a scalar has no length axis")),
        1 => Ok(0),
        r => Ok(r - 2),
    }
}

/// (sequences, length, channels) of a `[L]`, `[L, c]` or `[.., L, c]` tensor.
fn seq_dims(a: &Tensor) -> Result<(usize, usize, usize)> {
    let s = a.shape();
    match s.len() {
        0 => Err(dim_err("a scalar is not a sequence")),
        1 => Ok((1, s[0], 1)),
        r => Ok((s[..r - 2].iter().product(), s[r - 2], s[r - 1])),
    }
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let err = || dim_err(format!("matmul shapes {:?} x {:?}", a.shape(), b.shape()));
    match (a.rank(), b.rank()) {
        (ra, 2) if ra >= 2 => {
            let k = a.shape()[ra - 1];
            let (kb, n) = (b.shape()[0], b.shape()[1]);
            if k != kb {
                return Err(err());
            }
            let m = a.len() / k.max(1);
            let m = if k == 0 { a.shape()[..ra - 1].iter().product() } else { m };
            let mut data = vec![0.0; m * n];
            kernels::gemm(m, k, n, View::row_major(a.data(), k), View::row_major(b.data(), n), 0.0, &mut data);
            count_macs((m * k * n) as u64);
            let mut shape = a.shape()[..ra - 1].to_vec();
            shape.push(n);
            Ok(Tensor::from_parts(shape, data))
        }
        (3, 3) => {
            let (g, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let (gb, kb, n) = (b.shape()[0], b.shape()[1], b.shape()[2]);
            if g != gb || k != kb {
                return Err(err());
            }
            let mut data = vec![0.0; g * m * n];
            for i in 0..g {
                kernels::gemm(
                    m,
                    k,
                    n,
                    View::row_major(&a.data()[i * m * k..], k),
                    View::row_major(&b.data()[i * k * n..], n),
                    0.0,
                    &mut data[i * m * n..(i + 1) * m * n],
                );
            }
            count_macs((g * m * k * n) as u64);
            Ok(Tensor::from_parts(vec![g, m, n], data))
        }
        _ => Err(err()),
    }
}

/// Gradients of one node's inputs given the gradient of its output.
fn node_backward(node: &Node, g: &[f64], wanted: &[bool]) -> Result<Vec<Option<Vec<f64>>>> {
    let inputs = &node.inputs;
    let mut res: Vec<Option<Vec<f64>>> = vec![None; inputs.len()];
    match &node.op {
        Op::Leaf => {}
        Op::MatMul => {
            let (a, b) = (&inputs[0], &inputs[1]);
            if b.rank() == 2 {
                let k = b.shape()[0];
                let n = b.shape()[1];
                let m = if k == 0 { 0 } else { a.len() / k };
                if wanted[0] {
                    // dA = dC * B^T
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, View::row_major(g, n), View::transposed(b.data(), n), 0.0, &mut da);
                    res[0] = Some(da);
                }
                if wanted[1] {
                    // dB = A^T * dC
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, View::transposed(a.data(), k), View::row_major(g, n), 0.0, &mut db);
                    res[1] = Some(db);
                }
            } else {
                let (gr, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
                let n = b.shape()[2];
                if wanted[0] {
                    let mut da = vec![0.0; gr * m * k];
                    for i in 0..gr {
                        kernels::gemm(
                            m,
                            n,
                            k,
                            View::row_major(&g[i * m * n..], n),
                            View::transposed(&b.data()[i * k * n..], n),
                            0.0,
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                    res[0] = Some(da);
                }
                if wanted[1] {
                    let mut db = vec![0.0; gr * k * n];
                    for i in 0..gr {
                        kernels::gemm(
                            k,
                            m,
                            n,
                            View::transposed(&a.data()[i * m * k..], k),
                            View::row_major(&g[i * m * n..], n),
                            0.0,
                            &mut db[i * k * n..(i + 1) * k * n],
                        );
                    }
                    res[1] = Some(db);
                }
            }
        }
        Op::Binary(op) => {
            let (a, b) = (&inputs[0], &inputs[1]);
            let shape = node.output.shape();
            let ia = Bcast::new(shape, a.shape());
            let ib = Bcast::new(shape, b.shape());
            match op {
                BinaryOp::Add | BinaryOp::Sub => {
                    if wanted[0] {
                        res[0] = Some(ia.reduce(g, a.len()));
                    }
                    if wanted[1] {
                        let mut gb = ib.reduce(g, b.len());
                        if *op == BinaryOp::Sub {
                            gb.iter_mut().for_each(|v| *v = -*v);
                        }
                        res[1] = Some(gb);
                    }
                }
                BinaryOp::Mul => {
                    let (da, db) = (a.data(), b.data());
                    if wanted[0] {
                        let prod = kernels::zip_broadcast(g.len(), &Bcast::Same, g, &ib, db, |x, y| x * y);
                        res[0] = Some(ia.reduce(&prod, a.len()));
                    }
                    if wanted[1] {
                        let prod = kernels::zip_broadcast(g.len(), &Bcast::Same, g, &ia, da, |x, y| x * y);
                        res[1] = Some(ib.reduce(&prod, b.len()));
                    }
                }
            }
        }
        Op::Activation(act) => {
            let y = node.output.data();
            let d = match act {
                Activation::Sigmoid => g.iter().zip(y).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect(),
                Activation::Tanh => g.iter().zip(y).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect(),
            };
            res[0] = Some(d);
        }
        Op::Concat { axis } => {
            let shape = node.output.shape();
            let (outer, total, inner) = kernels::split_axis(shape, *axis);
            let mut offset = 0;
            for (j, part) in inputs.iter().enumerate() {
                let len = part.shape()[*axis];
                if wanted[j] {
                    let mut d = Vec::with_capacity(part.len());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        d.extend_from_slice(&g[base..base + len * inner]);
                    }
                    res[j] = Some(d);
                }
                offset += len;
            }
        }
        Op::PadFront { axis, count } => {
            let (outer, len, inner) = kernels::split_axis(inputs[0].shape(), *axis);
            let padded = len + count;
            let mut d = Vec::with_capacity(inputs[0].len());
            for o in 0..outer {
                let base = (o * padded + count) * inner;
                d.extend_from_slice(&g[base..base + len * inner]);
            }
            res[0] = Some(d);
        }
        Op::Slice { axis, start } => {
            let (outer, len, inner) = kernels::split_axis(inputs[0].shape(), *axis);
            let taken = node.output.shape()[*axis];
            let mut d = vec![0.0; inputs[0].len()];
            for o in 0..outer {
                let dst = (o * len + start) * inner;
                d[dst..dst + taken * inner].copy_from_slice(&g[o * taken * inner..(o + 1) * taken * inner]);
            }
            res[0] = Some(d);
        }
        Op::Reduce { op, axis } => {
            let (outer, len, inner) = kernels::split_axis(inputs[0].shape(), *axis);
            let scale = match op {
                Reduction::Sum => 1.0,
                Reduction::Mean => 1.0 / len.max(1) as f64,
            };
            let mut d = Vec::with_capacity(inputs[0].len());
            for o in 0..outer {
                let src = &g[o * inner..(o + 1) * inner];
                for _ in 0..len {
                    d.extend(src.iter().map(|v| v * scale));
                }
            }
            res[0] = Some(d);
        }
        Op::Reshape => res[0] = Some(g.to_vec()),
        Op::Permute { order } => {
            let inv = kernels::inverse_permutation(order);
            let (_, d) = kernels::permute(g, node.output.shape(), &inv);
            res[0] = Some(d);
        }
        Op::SlidingMatMul { width, count } => {
            let (a, w) = (&inputs[0], &inputs[1]);
            let (seqs, len, c) = seq_dims(a)?;
            let d = w.shape()[0];
            if wanted[0] {
                let mut da = vec![0.0; a.len()];
                kernels::sliding_gemm_da(seqs, len, c, w.data(), g, d, *width, *count, &mut da);
                res[0] = Some(da);
            }
            if wanted[1] {
                let mut dw = vec![0.0; w.len()];
                kernels::sliding_gemm_dw(a.data(), seqs, len, c, g, d, *width, *count, &mut dw);
                res[1] = Some(dw);
            }
        }
    }
    Ok(res)
}

/// Central-difference check of `backward` for a scalar function of `x`.
///
/// Returns `max_i |fd_i - ad_i| / max(1, |fd_i|, |ad_i|)` where `fd_i` is
/// `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &Tensor) -> Result<Tensor>,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {h}")));
    }
    let mut g = Graph::new();
    let xt = g.leaf(x);
    let y = f(&mut g, &xt)?;
    let grads = g.backward(&y)?;
    let ad = grads.get_or_zeros(&xt);
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&mut Graph::new(), &Tensor::new(x.shape(), probe.clone())?)?.item();
        probe[i] = orig - h;
        let down = f(&mut Graph::new(), &Tensor::new(x.shape(), probe.clone())?)?.item();
        probe[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let a = ad.data()[i];
        let err = (fd - a).abs() / 1f64.max(fd.abs()).max(a.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
