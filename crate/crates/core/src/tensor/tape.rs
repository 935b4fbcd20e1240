use rand::Rng;

use super::{broadcast_shape, split_axis, Strides, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Relu(usize),
    Sigmoid(usize),
    Log(usize),
    LogSigmoid(usize),
    Cos(usize),
    Sin(usize),
    Softmax { x: usize, axis: usize },
    SegmentSoftmax { x: usize, segments: Vec<usize> },
    SegmentSum { x: usize, segments: Vec<usize> },
    Sum(usize),
    SumAxis { x: usize, axis: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    IndexSelect { x: usize, axis: usize, indices: Vec<usize> },
    Dropout { x: usize, mask: Vec<f64> },
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    /// Whether any leaf feeds into this value.
    grad: bool,
}

impl Op {
    fn any_input(&self, mut f: impl FnMut(usize) -> bool) -> bool {
        match self {
            Op::Leaf => true,
            Op::Constant => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => f(*a) || f(*b),
            Op::Scale(x, _)
            | Op::Transpose(x)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Log(x)
            | Op::LogSigmoid(x)
            | Op::Cos(x)
            | Op::Sin(x)
            | Op::Sum(x)
            | Op::Reshape(x) => f(*x),
            Op::Softmax { x, .. }
            | Op::SegmentSoftmax { x, .. }
            | Op::SegmentSum { x, .. }
            | Op::SumAxis { x, .. }
            | Op::IndexSelect { x, .. }
            | Op::Dropout { x, .. } => f(*x),
            Op::Concat { inputs, .. } => inputs.iter().any(|i| f(*i)),
        }
    }
}

/// Append-only record of forward operations.
///
/// Inputs of every node precede it, so a single reverse sweep over the node
/// list is a valid topological order for backpropagation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`. Leaves that the loss does not depend on hold zeros;
    /// interior nodes off the loss path return `None`.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
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

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))` without overflow for large `|x|`.
fn log_sigmoid(x: f64) -> f64 {
    -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
}

/// Sums `grad` (shaped like the broadcast output) back onto `in_shape`.
fn reduce_broadcast(grad: &[f64], in_shape: &[usize], out_shape: &[usize]) -> Tensor {
    if in_shape == out_shape {
        return Tensor::from_parts(in_shape.to_vec(), grad.to_vec());
    }
    let numel = in_shape.iter().product();
    let mut out = vec![0.0; numel];
    Strides::new(in_shape, out_shape).for_each(grad.len(), |k, off| out[off] += grad[k]);
    Tensor::from_parts(in_shape.to_vec(), out)
}

/// `g * other` with `other` broadcast to `out_shape`.
fn broadcast_binary(g: &[f64], out_shape: &[usize], other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    if other.shape() == out_shape {
        return g.iter().zip(other.data()).map(|(a, b)| f(*a, *b)).collect();
    }
    let d = other.data();
    let mut out = vec![0.0; g.len()];
    Strides::new(other.shape(), out_shape).for_each(g.len(), |k, j| out[k] = f(g[k], d[j]));
    out
}

/// `a [m, n] * b^T` for `b [k, n]`.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a^T * g` for `a [m, k]`, `g [m, n]`.
fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

fn segment_count(segments: &[usize]) -> usize {
    segments.iter().max().map_or(0, |m| m + 1)
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let grad = op.any_input(|i| self.nodes[i].grad);
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    /// Records an input value. Gradients are reported for every leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| shape_err(op_name, ta, tb))?;
        let data = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect()
        } else {
            let numel: usize = shape.iter().product();
            let mut out = vec![0.0; numel];
            let oa = Strides::new(ta.shape(), &shape);
            let (da, db) = (ta.data(), tb.data());
            let mut offsets_a = vec![0usize; numel];
            oa.for_each(numel, |k, i| offsets_a[k] = i);
            Strides::new(tb.shape(), &shape).for_each(numel, |k, j| out[k] = f(da[offsets_a[k]], db[j]));
            out
        };
        Ok(self.push(Tensor::from_parts(shape, data), op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| f(*v)).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(value, op)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, |v| v * factor, Op::Scale(x.0, factor))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, stable_sigmoid, Op::Sigmoid(x.0))
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, log_sigmoid, Op::LogSigmoid(x.0))
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, f64::cos, Op::Cos(x.0))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, f64::sin, Op::Sin(x.0))
    }

    pub fn log(&mut self, x: Var) -> Result<Var, TensorError> {
        if let Some(bad) = self.value(x).data().iter().find(|v| **v <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                reason: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(x, f64::ln, Op::Log(x.0)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, k2, n) = match (ta.shape(), tb.shape()) {
            ([m, k], [k2, n]) => (*m, *k, *k2, *n),
            _ => return Err(shape_err("matmul", ta, tb)),
        };
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let data = matmul_raw(ta.data(), tb.data(), m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::MatMul(a.0, b.0)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let [r, c] = *t.shape() else {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: t.shape().to_vec(),
                reason: "expected a matrix".into(),
            });
        };
        let data = transpose_raw(t.data(), r, c);
        Ok(self.push(Tensor::from_parts(vec![c, r], data), Op::Transpose(x.0)))
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<(), TensorError> {
        let shape = self.value(x).shape();
        if axis >= shape.len() {
            return Err(TensorError::InvalidShape {
                op,
                shape: shape.to_vec(),
                reason: format!("axis {axis} out of range"),
            });
        }
        Ok(())
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis("softmax", x, axis)?;
        let t = self.value(x);
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x: x.0, axis }))
    }

    fn check_segments(&self, op: &'static str, x: Var, segments: &[usize]) -> Result<usize, TensorError> {
        let shape = self.value(x).shape();
        if shape.is_empty() || shape[0] != segments.len() {
            return Err(TensorError::Shape {
                op,
                lhs: shape.to_vec(),
                rhs: vec![segments.len()],
            });
        }
        Ok(shape[1..].iter().product())
    }

    /// Softmax over groups of rows: row `r` is normalized together with all
    /// rows sharing `segments[r]`. `x` must be `[n]` or `[n, 1]`.
    pub fn segment_softmax(&mut self, x: Var, segments: &[usize]) -> Result<Var, TensorError> {
        let width = self.check_segments("segment_softmax", x, segments)?;
        if width != 1 {
            return Err(TensorError::InvalidShape {
                op: "segment_softmax",
                shape: self.value(x).shape().to_vec(),
                reason: "expected one score per row".into(),
            });
        }
        let t = self.value(x);
        let count = segment_count(segments);
        let mut max = vec![f64::NEG_INFINITY; count];
        for (v, s) in t.data().iter().zip(segments) {
            max[*s] = max[*s].max(*v);
        }
        let mut total = vec![0.0; count];
        let mut out: Vec<f64> = t
            .data()
            .iter()
            .zip(segments)
            .map(|(v, s)| {
                let e = (v - max[*s]).exp();
                total[*s] += e;
                e
            })
            .collect();
        for (o, s) in out.iter_mut().zip(segments) {
            *o /= total[*s];
        }
        let shape = t.shape().to_vec();
        let op = Op::SegmentSoftmax {
            x: x.0,
            segments: segments.to_vec(),
        };
        Ok(self.push(Tensor::from_parts(shape, out), op))
    }

    /// Sums rows into `count` buckets. Buckets without rows are zero.
    pub fn segment_sum(&mut self, x: Var, segments: &[usize], count: usize) -> Result<Var, TensorError> {
        let width = self.check_segments("segment_sum", x, segments)?;
        if count == 0 || segments.iter().any(|s| *s >= count) {
            return Err(TensorError::InvalidShape {
                op: "segment_sum",
                shape: vec![count],
                reason: "segment id out of range".into(),
            });
        }
        let t = self.value(x);
        let mut out = vec![0.0; count * width];
        for (r, s) in segments.iter().enumerate() {
            let src = &t.data()[r * width..(r + 1) * width];
            for (o, v) in out[s * width..(s + 1) * width].iter_mut().zip(src) {
                *o += v;
            }
        }
        let mut shape = t.shape().to_vec();
        shape[0] = count;
        let op = Op::SegmentSum {
            x: x.0,
            segments: segments.to_vec(),
        };
        Ok(self.push(Tensor::from_parts(shape, out), op))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(x.0))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis`, dropping it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis("sum_axis", x, axis)?;
        let t = self.value(x);
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += t.data()[o * n * inner + j * inner + i];
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        Ok(self.push(Tensor::from_parts(shape, out), Op::SumAxis { x: x.0, axis }))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = *inputs.first().ok_or_else(|| TensorError::InvalidShape {
            op: "concat",
            shape: vec![],
            reason: "no inputs".into(),
        })?;
        self.check_axis("concat", first, axis)?;
        let base = self.value(first).shape().to_vec();
        let mut extents = Vec::with_capacity(inputs.len());
        for v in inputs {
            let s = self.value(*v).shape();
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            extents.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let total: usize = extents.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, n) in inputs.iter().zip(&extents) {
                let block = n * inner;
                out.extend_from_slice(&self.value(*v).data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let op = Op::Concat {
            inputs: inputs.iter().map(|v| v.0).collect(),
            axis,
        };
        Ok(self.push(Tensor::from_parts(shape, out), op))
    }

    /// Picks slices along `axis` in the given order; indices may repeat.
    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var, TensorError> {
        self.check_axis("index_select", x, axis)?;
        let t = self.value(x);
        let (outer, n, inner) = split_axis(t.shape(), axis);
        if indices.is_empty() || indices.iter().any(|i| *i >= n) {
            return Err(TensorError::InvalidShape {
                op: "index_select",
                shape: t.shape().to_vec(),
                reason: format!("indices must be non-empty and below {n}"),
            });
        }
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let start = o * n * inner + i * inner;
                out.extend_from_slice(&t.data()[start..start + inner]);
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = indices.len();
        let op = Op::IndexSelect {
            x: x.0,
            axis,
            indices: indices.to_vec(),
        };
        Ok(self.push(Tensor::from_parts(shape, out), op))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, TensorError> {
        self.index_select(x, 0, rows)
    }

    /// Inverted dropout. In eval mode, or with `p == 0`, returns `x` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, train: bool, rng: &mut R) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let t = self.value(x);
        let mask: Vec<f64> = (0..t.numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        Ok(self.push(value, Op::Dropout { x: x.0, mask }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x.0)))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(lt.shape().to_vec(), vec![1.0]));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if matches!(node.op, Op::Leaf) && g.is_none() {
                let shape = node.value.shape().to_vec();
                let n = node.value.numel();
                *g = Some(Tensor::from_parts(shape, vec![0.0; n]));
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |i: usize| &self.nodes[i].value;
        let want = |i: usize| self.nodes[i].grad;
        let out_shape = node.value.shape();
        let elementwise = |x: usize, f: &dyn Fn(f64, f64, f64) -> f64| {
            let xv = val(x);
            let data = g
                .data()
                .iter()
                .zip(xv.data())
                .zip(node.value.data())
                .map(|((g, x), y)| f(*g, *x, *y))
                .collect();
            Tensor::from_parts(xv.shape().to_vec(), data)
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                for x in [*a, *b] {
                    if want(x) {
                        accumulate(grads, x, reduce_broadcast(g.data(), val(x).shape(), out_shape));
                    }
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, reduce_broadcast(g.data(), val(*a).shape(), out_shape));
                }
                if want(*b) {
                    let neg: Vec<f64> = g.data().iter().map(|v| -v).collect();
                    accumulate(grads, *b, reduce_broadcast(&neg, val(*b).shape(), out_shape));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if want(*a) {
                    let ga = broadcast_binary(g.data(), out_shape, tb, |g, y| g * y);
                    accumulate(grads, *a, reduce_broadcast(&ga, ta.shape(), out_shape));
                }
                if want(*b) {
                    let gb = broadcast_binary(g.data(), out_shape, ta, |g, x| g * x);
                    accumulate(grads, *b, reduce_broadcast(&gb, tb.shape(), out_shape));
                }
            }
            Op::Scale(x, f) => accumulate(grads, *x, elementwise(*x, &|g, _, _| g * f)),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if want(*a) {
                    let ga = matmul_nt(g.data(), tb.data(), m, n, k);
                    accumulate(grads, *a, Tensor::from_parts(vec![m, k], ga));
                }
                if want(*b) {
                    let gb = matmul_tn(ta.data(), g.data(), m, k, n);
                    accumulate(grads, *b, Tensor::from_parts(vec![k, n], gb));
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (out_shape[0], out_shape[1]);
                let data = transpose_raw(g.data(), r, c);
                accumulate(grads, *x, Tensor::from_parts(vec![c, r], data));
            }
            Op::Relu(x) => accumulate(grads, *x, elementwise(*x, &|g, x, _| if x > 0.0 { g } else { 0.0 })),
            Op::Sigmoid(x) => accumulate(grads, *x, elementwise(*x, &|g, _, y| g * y * (1.0 - y))),
            Op::Log(x) => accumulate(grads, *x, elementwise(*x, &|g, x, _| g / x)),
            Op::LogSigmoid(x) => accumulate(grads, *x, elementwise(*x, &|g, x, _| g * stable_sigmoid(-x))),
            Op::Cos(x) => accumulate(grads, *x, elementwise(*x, &|g, x, _| -g * x.sin())),
            Op::Sin(x) => accumulate(grads, *x, elementwise(*x, &|g, x, _| g * x.cos())),
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(out_shape, *axis);
                let y = node.value.data();
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + i;
                        let dot: f64 = (0..n).map(|j| g.data()[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] = y[at(j)] * (g.data()[at(j)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, Tensor::from_parts(out_shape.to_vec(), gx));
            }
            Op::SegmentSoftmax { x, segments } => {
                let y = node.value.data();
                let mut dot = vec![0.0; segment_count(segments)];
                for ((gv, yv), s) in g.data().iter().zip(y).zip(segments) {
                    dot[*s] += gv * yv;
                }
                let gx = g
                    .data()
                    .iter()
                    .zip(y)
                    .zip(segments)
                    .map(|((gv, yv), s)| yv * (gv - dot[*s]))
                    .collect();
                accumulate(grads, *x, Tensor::from_parts(out_shape.to_vec(), gx));
            }
            Op::SegmentSum { x, segments } => {
                let xs = val(*x).shape();
                let width: usize = xs[1..].iter().product();
                let mut gx = Vec::with_capacity(segments.len() * width);
                for s in segments {
                    gx.extend_from_slice(&g.data()[s * width..(s + 1) * width]);
                }
                accumulate(grads, *x, Tensor::from_parts(xs.to_vec(), gx));
            }
            Op::Sum(x) => {
                let xv = val(*x);
                let gv = g.data()[0];
                accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), vec![gv; xv.numel()]));
            }
            Op::SumAxis { x, axis } => {
                let xs = val(*x).shape();
                let (outer, n, inner) = split_axis(xs, *axis);
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            gx[o * n * inner + j * inner + i] = g.data()[o * inner + i];
                        }
                    }
                }
                accumulate(grads, *x, Tensor::from_parts(xs.to_vec(), gx));
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for v in inputs {
                    let vs = val(*v).shape();
                    let n = vs[*axis];
                    if !want(*v) {
                        offset += n;
                        continue;
                    }
                    let mut gx = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let start = o * total * inner + offset * inner;
                        gx.extend_from_slice(&g.data()[start..start + n * inner]);
                    }
                    accumulate(grads, *v, Tensor::from_parts(vs.to_vec(), gx));
                    offset += n;
                }
            }
            Op::IndexSelect { x, axis, indices } => {
                let xs = val(*x).shape();
                let (outer, n, inner) = split_axis(xs, *axis);
                let k = indices.len();
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for (slot, &i) in indices.iter().enumerate() {
                        let src = o * k * inner + slot * inner;
                        let dst = o * n * inner + i * inner;
                        for c in 0..inner {
                            gx[dst + c] += g.data()[src + c];
                        }
                    }
                }
                accumulate(grads, *x, Tensor::from_parts(xs.to_vec(), gx));
            }
            Op::Dropout { x, mask } => {
                let data = g.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                accumulate(grads, *x, Tensor::from_parts(out_shape.to_vec(), data));
            }
            Op::Reshape(x) => {
                let xs = val(*x).shape().to_vec();
                accumulate(grads, *x, Tensor::from_parts(xs, g.data().to_vec()));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mat(r: usize, c: usize, v: &[f64]) -> Tensor {
        Tensor::matrix(r, c, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut tape = Tape::new();
        let i2 = tape.leaf(mat(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.leaf(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.leaf(mat(1, 1, &[2.0]));
        let b = tape.leaf(mat(1, 1, &[3.0]));
        let p = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(p).data(), &[6.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]).unwrap());
        let b = tape.leaf(Tensor::zeros(&[2, 3]).unwrap());
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, TensorError::Shape { op: "matmul", .. }));
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0; 3]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = tape.leaf(Tensor::vector(vec![1000.0, 0.0]).unwrap());
        let y = tape.softmax(big, 0).unwrap();
        let d = tape.value(y).data();
        assert_eq!(d[0], 1.0);
        assert!(d[1] >= 0.0 && d[1] < 1e-300);
        assert!(tape.softmax(big, 1).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(mat(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 7.0]));
        let y = tape.softmax(x, 1).unwrap();
        for r in 0..2 {
            let s: f64 = tape.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn elementwise_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0, -3.0]).unwrap());
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s).data()[0], 0.5);
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0]);
        assert!(matches!(tape.log(x), Err(TensorError::Domain { .. })));
        let ls = tape.log_sigmoid(x);
        assert!((tape.value(ls).data()[0] + std::f64::consts::LN_2).abs() < 1e-15);
        let far = tape.leaf(Tensor::vector(vec![-800.0, 800.0]).unwrap());
        let ls = tape.log_sigmoid(far);
        assert_eq!(tape.value(ls).data(), &[-800.0, 0.0]);
    }

    #[test]
    fn concat_and_linear_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(mat(1, 1, &[1.0]));
        let b = tape.leaf(mat(1, 1, &[2.0]));
        let c = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 1]);
        assert_eq!(tape.value(c).data(), &[1.0, 2.0]);

        let u = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
        let v = tape.leaf(Tensor::vector(vec![4.0, 5.0, 6.0]).unwrap());
        let w = tape.leaf(Tensor::vector(vec![7.0, 8.0, 9.0]).unwrap());
        let cat = tape.concat(&[u, v, w], 0).unwrap();
        assert_eq!(tape.value(cat).shape(), &[9]);
        let s = tape.sum(cat);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(u).unwrap().data(), &[1.0, 1.0, 1.0]);

        let bad = tape.leaf(Tensor::zeros(&[2, 2]).unwrap());
        assert!(tape.concat(&[a, bad], 0).is_err());
    }

    #[test]
    fn backward_linear_and_unreachable() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]).unwrap());
        let unused = tape.leaf(Tensor::vector(vec![5.0]).unwrap());
        let two_x = tape.scale(x, 2.0);
        let loss = tape.sum(two_x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(g.get(unused).unwrap().data(), &[0.0]);
        assert!(matches!(tape.backward(two_x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0; 10_000]).unwrap());
        assert_eq!(tape.dropout(x, 0.5, false, &mut rng).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert!(tape.dropout(x, 1.0, true, &mut rng).is_err());
        assert!(tape.dropout(x, -0.1, true, &mut rng).is_err());
        let y = tape.dropout(x, 0.5, true, &mut rng).unwrap();
        let survivors = tape.value(y).data().iter().filter(|v| **v != 0.0).count();
        let frac = survivors as f64 / 10_000.0;
        // 0.03 is six standard deviations of a Binomial(1e4, 0.5) fraction.
        assert!((frac - 0.5).abs() < 0.03, "{frac}");
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0 || *v == 2.0));
    }

    #[test]
    fn segment_ops() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 1.0, 5.0, 0.0]).unwrap());
        let seg = [0, 0, 2, 2];
        let y = tape.segment_softmax(x, &seg).unwrap();
        let d = tape.value(y).data().to_vec();
        assert!((d[0] - 0.5).abs() < 1e-15 && (d[1] - 0.5).abs() < 1e-15);
        assert!((d[2] + d[3] - 1.0).abs() < 1e-15);
        let rows = tape.leaf(mat(4, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let s = tape.segment_sum(rows, &seg, 3).unwrap();
        assert_eq!(tape.value(s).data(), &[4.0, 6.0, 0.0, 0.0, 12.0, 14.0]);
    }
}
