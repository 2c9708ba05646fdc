use super::{split_axis, Tensor, TensorError};

const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;
const SELU_SCALE: f64 = 1.050_700_987_355_480_5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
    Min,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Affine { x: NodeId, scale: f64 },
    Concat { inputs: Vec<NodeId>, axis: usize },
    Slice { x: NodeId, axis: usize, start: usize },
    Reduce { x: NodeId, axis: usize, kind: ReduceKind, arg: Vec<usize> },
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Selu(NodeId),
    Log(NodeId),
    Abs(NodeId),
    Clamp { x: NodeId, lo: f64, hi: f64 },
    Stack(Vec<NodeId>),
    Reshape(NodeId),
    GatherRows { x: NodeId, indices: Vec<usize> },
    SegmentReduce { x: NodeId, segments: Vec<usize>, kind: ReduceKind, arg: Vec<usize>, counts: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Record of executed operations. Nodes are appended in execution order, so
/// the node list is always topologically sorted.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `id`; leaves the loss does not depend on get zeros.
    pub fn get(&self, id: NodeId) -> Tensor {
        match self.grads.get(id.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    pub fn take(&mut self, id: NodeId) -> Tensor {
        match self.grads[id.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn require_rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize), TensorError> {
    if t.rank() != 2 {
        return Err(TensorError::InvalidShape {
            op,
            shape: t.shape().to_vec(),
            reason: "expected a matrix".into(),
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn selu(x: f64) -> f64 {
    if x > 0.0 {
        SELU_SCALE * x
    } else {
        SELU_SCALE * SELU_ALPHA * (x.exp() - 1.0)
    }
}

impl Tape {
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

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    fn zip_with(
        &mut self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        record: Op,
    ) -> Result<NodeId, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, record))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = require_rank2("matmul", ta)?;
        let (k2, n) = require_rank2("matmul", tb)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let value = Tensor::new(vec![m, n], matmul_raw(ta.data(), tb.data(), m, k, n))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push(value, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: NodeId, scale: f64) -> NodeId {
        self.affine(x, scale, 0.0)
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId, TensorError> {
        let first = inputs.first().ok_or_else(|| TensorError::InvalidShape {
            op: "concat",
            shape: vec![],
            reason: "no inputs".into(),
        })?;
        let base = self.value(*first).shape().to_vec();
        let (outer, _, inner) = split_axis("concat", &base, axis)?;
        let mut total = 0;
        for &id in inputs {
            let s = self.value(id).shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: base.clone(),
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &id in inputs {
                let t = self.value(id);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(
        &mut self,
        x: NodeId,
        axis: usize,
        start: usize,
        end: usize,
    ) -> Result<NodeId, TensorError> {
        let t = self.value(x);
        let (outer, extent, inner) = split_axis("slice", t.shape(), axis)?;
        if start > end || end > extent {
            return Err(TensorError::IndexOutOfRange {
                op: "slice",
                index: end,
                extent,
            });
        }
        let width = end - start;
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * extent * inner;
            data.extend_from_slice(&t.data()[base + start * inner..base + end * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = width;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Slice { x, axis, start }))
    }

    /// Reduces `axis` away. Max and min pick the first attaining index.
    pub fn reduce(&mut self, x: NodeId, axis: usize, kind: ReduceKind) -> Result<NodeId, TensorError> {
        let t = self.value(x);
        let (outer, extent, inner) = split_axis("reduce", t.shape(), axis)?;
        if extent == 0 && matches!(kind, ReduceKind::Max | ReduceKind::Min) {
            return Err(TensorError::EmptySegment { op: "reduce", segment: 0 });
        }
        let mut data = vec![0.0; outer * inner];
        let mut arg = Vec::new();
        if matches!(kind, ReduceKind::Max | ReduceKind::Min) {
            arg = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| t.data()[(o * extent + k) * inner + i];
                let out = o * inner + i;
                match kind {
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let mut s = 0.0;
                        for k in 0..extent {
                            s += at(k);
                        }
                        if kind == ReduceKind::Mean && extent > 0 {
                            s /= extent as f64;
                        }
                        data[out] = s;
                    }
                    ReduceKind::Max | ReduceKind::Min => {
                        let mut best = 0;
                        for k in 1..extent {
                            let better = if kind == ReduceKind::Max {
                                at(k) > at(best)
                            } else {
                                at(k) < at(best)
                            };
                            if better {
                                best = k;
                            }
                        }
                        data[out] = at(best);
                        arg[out] = best;
                    }
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Reduce { x, axis, kind, arg }))
    }

    pub fn reduce_sum(&mut self, x: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        self.reduce(x, axis, ReduceKind::Sum)
    }

    pub fn reduce_mean(&mut self, x: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        self.reduce(x, axis, ReduceKind::Mean)
    }

    pub fn reduce_max(&mut self, x: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        self.reduce(x, axis, ReduceKind::Max)
    }

    pub fn reduce_min(&mut self, x: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        self.reduce(x, axis, ReduceKind::Min)
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let n = self.value(x).len();
        let flat = self.reshape(x, vec![n])?;
        self.reduce_sum(flat, 0)
    }

    /// Mean of every element, as a scalar.
    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let n = self.value(x).len();
        let flat = self.reshape(x, vec![n])?;
        self.reduce_mean(flat, 0)
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let value = self.value(x).map(f);
        self.push(value, op)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn selu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, selu, Op::Selu(x))
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, inputs: &[NodeId]) -> Result<NodeId, TensorError> {
        let first = inputs.first().ok_or_else(|| TensorError::InvalidShape {
            op: "stack",
            shape: vec![],
            reason: "no inputs".into(),
        })?;
        let base = self.value(*first).shape().to_vec();
        let mut data = Vec::with_capacity(inputs.len() * self.value(*first).len());
        for &id in inputs {
            let t = self.value(id);
            if t.shape() != base.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    left: base,
                    right: t.shape().to_vec(),
                });
            }
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![inputs.len()];
        shape.extend_from_slice(&base);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Stack(inputs.to_vec())))
    }

    /// Inverse of [`Tape::stack`]: splits along the leading axis.
    pub fn unstack(&mut self, x: NodeId) -> Result<Vec<NodeId>, TensorError> {
        let shape = self.value(x).shape().to_vec();
        let (&n, rest) = shape.split_first().ok_or_else(|| TensorError::InvalidShape {
            op: "unstack",
            shape: shape.clone(),
            reason: "scalar has no leading axis".into(),
        })?;
        (0..n)
            .map(|i| {
                let s = self.slice(x, 0, i, i + 1)?;
                self.reshape(s, rest.to_vec())
            })
            .collect()
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, TensorError> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Selects rows of a matrix; indices may repeat.
    pub fn gather_rows(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId, TensorError> {
        let t = self.value(x);
        let (rows, cols) = require_rank2("gather_rows", t)?;
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    extent: rows,
                });
            }
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(vec![indices.len(), cols], data)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Reduces the rows of `x` into `num_segments` groups; row `r` belongs to
    /// `segments[r]`. Rows are visited in index order. Empty groups are zero
    /// for sum and mean and an error for max and min.
    pub fn segment_reduce(
        &mut self,
        x: NodeId,
        segments: &[usize],
        num_segments: usize,
        kind: ReduceKind,
    ) -> Result<NodeId, TensorError> {
        let t = self.value(x);
        let (rows, cols) = require_rank2("segment_reduce", t)?;
        if segments.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "segment_reduce",
                left: vec![rows, cols],
                right: vec![segments.len()],
            });
        }
        let mut counts = vec![0usize; num_segments];
        for &s in segments {
            if s >= num_segments {
                return Err(TensorError::IndexOutOfRange {
                    op: "segment_reduce",
                    index: s,
                    extent: num_segments,
                });
            }
            counts[s] += 1;
        }
        let extremal = matches!(kind, ReduceKind::Max | ReduceKind::Min);
        if extremal {
            if let Some(empty) = counts.iter().position(|&c| c == 0) {
                return Err(TensorError::EmptySegment {
                    op: "segment_reduce",
                    segment: empty,
                });
            }
        }
        let mut data = vec![0.0; num_segments * cols];
        let mut arg = if extremal { vec![usize::MAX; num_segments * cols] } else { Vec::new() };
        for (r, &s) in segments.iter().enumerate() {
            let row = t.row(r);
            for (j, &v) in row.iter().enumerate() {
                let out = s * cols + j;
                match kind {
                    ReduceKind::Sum | ReduceKind::Mean => data[out] += v,
                    ReduceKind::Max | ReduceKind::Min => {
                        let take = arg[out] == usize::MAX
                            || (kind == ReduceKind::Max && v > data[out])
                            || (kind == ReduceKind::Min && v < data[out]);
                        if take {
                            data[out] = v;
                            arg[out] = r;
                        }
                    }
                }
            }
        }
        if kind == ReduceKind::Mean {
            for (s, &c) in counts.iter().enumerate() {
                if c > 0 {
                    for v in &mut data[s * cols..(s + 1) * cols] {
                        *v /= c as f64;
                    }
                }
            }
        }
        let value = Tensor::new(vec![num_segments, cols], data)?;
        Ok(self.push(
            value,
            Op::SegmentReduce {
                x,
                segments: segments.to_vec(),
                kind,
                arg,
                counts,
            },
        ))
    }

    /// Reverse sweep from a one-element `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, TensorError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut acc = |id: NodeId, t: Tensor| match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let with_shape = |like: &Tensor, data: Vec<f64>| {
            Tensor::new(like.shape().to_vec(), data).expect("gradient shape")
        };
        let elementwise = |x: NodeId, f: &dyn Fn(f64, f64, f64) -> f64| {
            let xv = self.value(x);
            let data = g
                .data()
                .iter()
                .zip(xv.data())
                .zip(out.data())
                .map(|((&gi, &xi), &yi)| f(gi, xi, yi))
                .collect();
            with_shape(xv, data)
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                let gb = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                acc(*a, with_shape(va, ga));
                acc(*b, with_shape(vb, gb));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                let bt = transpose_raw(vb.data(), k, n);
                let at = transpose_raw(va.data(), m, k);
                acc(*a, with_shape(va, matmul_raw(g.data(), &bt, m, n, k)));
                acc(*b, with_shape(vb, matmul_raw(&at, g.data(), k, m, n)));
            }
            Op::Affine { x, scale } => acc(*x, g.map(|v| v * scale)),
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis("concat", out.shape(), *axis).expect("shape");
                let mut offset = 0;
                for &id in inputs {
                    let xv = self.value(id);
                    let width = xv.shape()[*axis];
                    let mut data = Vec::with_capacity(xv.len());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        data.extend_from_slice(&g.data()[base..base + width * inner]);
                    }
                    offset += width;
                    acc(id, with_shape(xv, data));
                }
            }
            Op::Slice { x, axis, start } => {
                let xv = self.value(*x);
                let (outer, extent, inner) = split_axis("slice", xv.shape(), *axis).expect("shape");
                let width = out.shape()[*axis];
                let mut data = vec![0.0; xv.len()];
                for o in 0..outer {
                    let dst = (o * extent + start) * inner;
                    let src = o * width * inner;
                    data[dst..dst + width * inner].copy_from_slice(&g.data()[src..src + width * inner]);
                }
                acc(*x, with_shape(xv, data));
            }
            Op::Reduce { x, axis, kind, arg } => {
                let xv = self.value(*x);
                let (outer, extent, inner) = split_axis("reduce", xv.shape(), *axis).expect("shape");
                let mut data = vec![0.0; xv.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let gi = g.data()[o * inner + j];
                        match kind {
                            ReduceKind::Sum | ReduceKind::Mean => {
                                let share = if *kind == ReduceKind::Mean { gi / extent as f64 } else { gi };
                                for k in 0..extent {
                                    data[(o * extent + k) * inner + j] = share;
                                }
                            }
                            ReduceKind::Max | ReduceKind::Min => {
                                let k = arg[o * inner + j];
                                data[(o * extent + k) * inner + j] = gi;
                            }
                        }
                    }
                }
                acc(*x, with_shape(xv, data));
            }
            Op::Sigmoid(x) => acc(*x, elementwise(*x, &|gi, _, y| gi * y * (1.0 - y))),
            Op::Tanh(x) => acc(*x, elementwise(*x, &|gi, _, y| gi * (1.0 - y * y))),
            Op::Relu(x) => acc(*x, elementwise(*x, &|gi, xi, _| if xi > 0.0 { gi } else { 0.0 })),
            Op::Selu(x) => acc(
                *x,
                elementwise(*x, &|gi, xi, y| {
                    if xi > 0.0 {
                        gi * SELU_SCALE
                    } else {
                        gi * (y + SELU_SCALE * SELU_ALPHA)
                    }
                }),
            ),
            Op::Log(x) => acc(*x, elementwise(*x, &|gi, xi, _| gi / xi)),
            Op::Abs(x) => acc(*x, elementwise(*x, &|gi, xi, _| gi * xi.signum() * f64::from(xi != 0.0))),
            Op::Clamp { x, lo, hi } => acc(
                *x,
                elementwise(*x, &|gi, xi, _| if xi >= *lo && xi <= *hi { gi } else { 0.0 }),
            ),
            Op::Stack(inputs) => {
                let chunk = out.len() / inputs.len().max(1);
                for (k, &id) in inputs.iter().enumerate() {
                    let xv = self.value(id);
                    acc(id, with_shape(xv, g.data()[k * chunk..(k + 1) * chunk].to_vec()));
                }
            }
            Op::Reshape(x) => {
                let xv = self.value(*x);
                acc(*x, with_shape(xv, g.data().to_vec()));
            }
            Op::GatherRows { x, indices } => {
                let xv = self.value(*x);
                let cols = xv.shape()[1];
                let mut data = vec![0.0; xv.len()];
                for (r, &src) in indices.iter().enumerate() {
                    for j in 0..cols {
                        data[src * cols + j] += g.data()[r * cols + j];
                    }
                }
                acc(*x, with_shape(xv, data));
            }
            Op::SegmentReduce { x, segments, kind, arg, counts } => {
                let xv = self.value(*x);
                let cols = xv.shape()[1];
                let mut data = vec![0.0; xv.len()];
                match kind {
                    ReduceKind::Sum | ReduceKind::Mean => {
                        for (r, &s) in segments.iter().enumerate() {
                            let div = if *kind == ReduceKind::Mean { counts[s] as f64 } else { 1.0 };
                            for j in 0..cols {
                                data[r * cols + j] = g.data()[s * cols + j] / div;
                            }
                        }
                    }
                    ReduceKind::Max | ReduceKind::Min => {
                        for (out_idx, &r) in arg.iter().enumerate() {
                            let j = out_idx % cols;
                            data[r * cols + j] += g.data()[out_idx];
                        }
                    }
                }
                acc(*x, with_shape(xv, data));
            }
        }
    }
}
