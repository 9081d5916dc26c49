use std::fmt;

use super::grid::ValueGrid;
use super::kernels;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Zero padding convention for [`Tape::conv1d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output length equals input length; the extra pad for even widths goes on the right.
    Same,
    /// No padding; output length is `L - w + 1`.
    Valid,
}

impl Padding {
    /// Left padding and output length for a sequence of `len` with filter width `width`.
    pub fn geometry(self, len: usize, width: usize) -> Option<(usize, usize)> {
        match self {
            Padding::Same => Some(((width - 1) / 2, len)),
            Padding::Valid => (width <= len).then(|| (0, len - width + 1)),
        }
    }
}

/// A user-supplied differentiable operation.
///
/// Used by the gradient-check harness to verify that a wrong backward rule is
/// caught, and available for experiments that need an op the tape lacks.
pub trait CustomOp {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&ValueGrid]) -> Result<ValueGrid>;
    /// Returns one gradient per input, each the length of that input.
    fn backward(&self, inputs: &[&ValueGrid], output: &ValueGrid, grad_out: &[f64]) -> Vec<Vec<f64>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    Tanh(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv1d {
        x: Var,
        filters: Var,
        pad_left: usize,
    },
    MaxReduce {
        x: Var,
        argmax: Vec<usize>,
    },
    SumReduce(Var),
    SumAll(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Transpose(Var),
    Tile(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
    Custom {
        op: Box<dyn CustomOp>,
        inputs: Vec<Var>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Gelu(x)
            | Op::Relu(x)
            | Op::Tanh(x)
            | Op::Softmax { x, .. }
            | Op::MaxReduce { x, .. }
            | Op::SumReduce(x)
            | Op::SumAll(x)
            | Op::Slice { x, .. }
            | Op::Reshape(x)
            | Op::Transpose(x)
            | Op::Tile(x) => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Conv1d { x, filters, .. } => vec![*x, *filters],
            Op::Concat { inputs, .. } | Op::Custom { inputs, .. } => inputs.clone(),
            Op::Embedding { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Gelu(_) => "gelu",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv1d { .. } => "conv1d",
            Op::MaxReduce { .. } => "max_reduce",
            Op::SumReduce(_) => "sum_reduce",
            Op::SumAll(_) => "sum",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "split",
            Op::Reshape(_) => "reshape",
            Op::Transpose(_) => "transpose",
            Op::Tile(_) => "tile",
            Op::Embedding { .. } => "embedding_lookup",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node {
    value: ValueGrid,
    op: Op,
}

/// Records operations in execution order and replays them backwards.
///
/// Every op's inputs precede it on the tape, so a single reverse sweep is a
/// valid topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list()
            .entries(self.nodes.iter().map(|n| (n.op.name(), n.value.shape())))
            .finish()
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

    /// Records a leaf; gradients are collected iff `value.requires_grad()`.
    pub fn leaf(&mut self, value: ValueGrid) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: ValueGrid) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    pub fn variable(&mut self, value: ValueGrid) -> Var {
        self.leaf(value.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &ValueGrid {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Names of the recorded ops, in tape order.
    pub fn op_names(&self) -> Vec<&str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push(&mut self, value: ValueGrid, op: Op) -> Var {
        let value = if matches!(op, Op::Leaf) {
            value
        } else {
            let rg = op.inputs().iter().any(|v| self.nodes[v.0].value.requires_grad());
            value.with_requires_grad(rg)
        };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn out(shape: Vec<usize>, data: Vec<f64>) -> ValueGrid {
        ValueGrid::new(shape, data).expect("kernel produced inconsistent shape")
    }

    fn rank2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::invalid(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2(a, "matmul")?;
        let (k2, n) = self.rank2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let data = kernels::matmul(self.data(a), self.data(b), m, k, n);
        Ok(self.push(Self::out(vec![m, n], data), Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Self::out(shape, data), Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Self::out(shape, data), Op::Mul(a, b)))
    }

    /// Adds a vector to every row (last axis) of `x`; the bias term of affine layers.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        if self.shape(row) != [n] {
            return Err(Error::shape("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.data(row);
        let data = self
            .data(x)
            .chunks_exact(n)
            .flat_map(|c| c.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Self::out(shape, data), Op::AddRow(x, row)))
    }

    /// `x · w + b` for `x` [m×k], `w` [k×n], `b` [n].
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let data = self.data(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push(Self::out(shape, data), Op::Scale(x, factor))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Self::out(shape, data), Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Self::out(shape, data), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        self.push(Self::out(shape, data), Op::Tanh(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.value(x).axis_split(axis, "softmax")?;
        let data = kernels::softmax(self.data(x), outer, len, inner);
        let shape = self.shape(x).to_vec();
        Ok(self.push(Self::out(shape, data), Op::Softmax { x, axis }))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let h = *self.shape(x).last().unwrap();
        for p in [gain, bias] {
            if self.shape(p) != [h] {
                return Err(Error::shape("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let (xhat, inv_std) = kernels::normalize_rows(self.data(x), h, eps);
        let g = self.data(gain);
        let b = self.data(bias);
        let data = xhat
            .chunks_exact(h)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((x, g), b)| x * g + b))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Self::out(shape, data),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Cross-correlation of `x` [L×C] with `filters` [K×w×C] along the sequence axis.
    pub fn conv1d(&mut self, x: Var, filters: Var, padding: Padding) -> Result<Var> {
        let (len, channels) = self.rank2(x, "conv1d")?;
        let (k, w, c) = match *self.shape(filters) {
            [k, w, c] => (k, w, c),
            ref s => return Err(Error::invalid("conv1d", format!("filters must be K×w×C, got {s:?}"))),
        };
        if c != channels {
            return Err(Error::shape("conv1d", self.shape(x), self.shape(filters)));
        }
        let (pad_left, out_len) = padding.geometry(len, w).ok_or_else(|| {
            Error::invalid("conv1d", format!("filter width {w} exceeds sequence length {len} with valid padding"))
        })?;
        let data = kernels::conv1d(self.data(x), self.data(filters), len, c, k, w, pad_left, out_len);
        Ok(self.push(Self::out(vec![out_len, k], data), Op::Conv1d { x, filters, pad_left }))
    }

    /// Column-wise maximum of `x` [L×F] over the sequence axis.
    pub fn max_reduce(&mut self, x: Var) -> Result<Var> {
        let (len, f) = self.rank2(x, "max_reduce")?;
        let src = self.data(x);
        let mut argmax = vec![0usize; f];
        let mut data = src[..f].to_vec();
        for t in 1..len {
            for j in 0..f {
                let v = src[t * f + j];
                if v > data[j] {
                    data[j] = v;
                    argmax[j] = t;
                }
            }
        }
        Ok(self.push(Self::out(vec![f], data), Op::MaxReduce { x, argmax }))
    }

    /// Column-wise sum of `x` [L×F] over the sequence axis.
    pub fn sum_reduce(&mut self, x: Var) -> Result<Var> {
        let (len, f) = self.rank2(x, "sum_reduce")?;
        let src = self.data(x);
        let mut data = vec![0.0; f];
        for t in 0..len {
            for j in 0..f {
                data[j] += src[t * f + j];
            }
        }
        Ok(self.push(Self::out(vec![f], data), Op::SumReduce(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(ValueGrid::scalar(s), Op::SumAll(x))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::Axis {
                op: "concat",
                axis,
                shape: base,
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let block = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.data(v)[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            Self::out(shape, data),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Splits `x` along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let (outer, len, inner) = self.value(x).axis_split(axis, "split")?;
        if sizes.iter().sum::<usize>() != len || sizes.contains(&0) {
            return Err(Error::invalid(
                "split",
                format!("sizes {sizes:?} do not partition axis of length {len}"),
            ));
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &size in sizes {
            let src = self.data(x);
            let mut data = Vec::with_capacity(outer * size * inner);
            for o in 0..outer {
                let base = (o * len + start) * inner;
                data.extend_from_slice(&src[base..base + size * inner]);
            }
            let mut shape = self.shape(x).to_vec();
            shape[axis] = size;
            out.push(self.push(Self::out(shape, data), Op::Slice { x, axis, start }));
            start += size;
        }
        Ok(out)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let data = self.data(x).to_vec();
        Ok(self.push(Self::out(shape.to_vec(), data), Op::Reshape(x)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.rank2(x, "transpose")?;
        let data = kernels::transpose(self.data(x), r, c);
        Ok(self.push(Self::out(vec![c, r], data), Op::Transpose(x)))
    }

    /// Repeats the flattened values of `x` cyclically, truncated to exactly `len` values.
    pub fn tile(&mut self, x: Var, len: usize) -> Result<Var> {
        if len == 0 {
            return Err(Error::invalid("tile", "target length must be positive"));
        }
        let src = self.data(x);
        let data = (0..len).map(|i| src[i % src.len()]).collect();
        Ok(self.push(Self::out(vec![len], data), Op::Tile(x)))
    }

    /// Gathers rows of `table` [V×H] at `ids`, giving [L×H].
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, h) = self.rank2(table, "embedding_lookup")?;
        if ids.is_empty() {
            return Err(Error::invalid("embedding_lookup", "empty id sequence"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::IdOutOfRange {
                what: "embedding",
                id: bad,
                limit: vocab,
            });
        }
        let src = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * h);
        for &i in ids {
            data.extend_from_slice(&src[i * h..(i + 1) * h]);
        }
        Ok(self.push(
            Self::out(vec![ids.len(), h], data),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Negative log-likelihood of `target` under softmax(`logits`), as a scalar.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let n = match *self.shape(logits) {
            [n] => n,
            ref s => return Err(Error::invalid("cross_entropy", format!("logits must be a vector, got {s:?}"))),
        };
        if target >= n {
            return Err(Error::IdOutOfRange {
                what: "target",
                id: target,
                limit: n,
            });
        }
        let src = self.data(logits);
        let probs = kernels::softmax(src, 1, n, 1);
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + src.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - src[target];
        Ok(self.push(
            ValueGrid::scalar(loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
        ))
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&ValueGrid> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = op.forward(&values)?;
        let out = ValueGrid::new(out.shape().to_vec(), out.into_data())?;
        Ok(self.push(
            out,
            Op::Custom {
                op,
                inputs: inputs.to_vec(),
            },
        ))
    }

    /// Seeds `root` with a gradient of ones and accumulates gradients into
    /// every recorded value that requires them.
    pub fn backward(&mut self, root: Var) {
        let seed = vec![1.0; self.value(root).numel()];
        self.backward_with(root, seed);
    }

    pub fn backward_with(&mut self, root: Var, seed: Vec<f64>) {
        assert_eq!(seed.len(), self.value(root).numel(), "seed gradient length");
        if !self.value(root).requires_grad() {
            return;
        }
        self.nodes[root.0].value.accumulate_grad(&seed);
        for i in (0..=root.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if matches!(node.op, Op::Leaf) || !node.value.requires_grad() {
                continue;
            }
            let Some(grad) = node.value.grad() else {
                continue;
            };
            backprop(node, grad, before);
        }
    }
}

/// Gives mutable access to the gradient slot of `v` when it requires one.
fn slot(before: &mut [Node], v: Var) -> Option<&mut [f64]> {
    let value = &mut before[v.0].value;
    value.requires_grad().then(|| value.grad_mut_or_zeros())
}

fn val(before: &[Node], v: Var) -> &ValueGrid {
    &before[v.0].value
}

fn backprop(node: &Node, g: &[f64], before: &mut [Node]) {
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (val(before, *a).shape()[0], val(before, *a).shape()[1]);
            let n = val(before, *b).shape()[1];
            if val(before, *a).requires_grad() {
                let bd = val(before, *b).data().to_vec();
                kernels::matmul_grad_lhs(g, &bd, slot(before, *a).unwrap(), m, k, n);
            }
            if val(before, *b).requires_grad() {
                let ad = val(before, *a).data().to_vec();
                kernels::matmul_grad_rhs(&ad, g, slot(before, *b).unwrap(), m, k, n);
            }
        }
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(s) = slot(before, v) {
                    kernels::axpy(s, g, 1.0);
                }
            }
        }
        Op::Mul(a, b) => {
            let ad = val(before, *a).data().to_vec();
            let bd = val(before, *b).data().to_vec();
            if let Some(s) = slot(before, *a) {
                for ((s, g), b) in s.iter_mut().zip(g).zip(&bd) {
                    *s += g * b;
                }
            }
            if let Some(s) = slot(before, *b) {
                for ((s, g), a) in s.iter_mut().zip(g).zip(&ad) {
                    *s += g * a;
                }
            }
        }
        Op::AddRow(x, row) => {
            if let Some(s) = slot(before, *x) {
                kernels::axpy(s, g, 1.0);
            }
            if let Some(s) = slot(before, *row) {
                let n = s.len();
                for chunk in g.chunks_exact(n) {
                    kernels::axpy(s, chunk, 1.0);
                }
            }
        }
        Op::Scale(x, f) => {
            if let Some(s) = slot(before, *x) {
                kernels::axpy(s, g, *f);
            }
        }
        Op::Gelu(x) => {
            let xd = val(before, *x).data().to_vec();
            if let Some(s) = slot(before, *x) {
                for ((s, g), x) in s.iter_mut().zip(g).zip(&xd) {
                    *s += g * kernels::gelu_grad(*x);
                }
            }
        }
        Op::Relu(x) => {
            let xd = val(before, *x).data().to_vec();
            if let Some(s) = slot(before, *x) {
                for ((s, g), x) in s.iter_mut().zip(g).zip(&xd) {
                    if *x > 0.0 {
                        *s += g;
                    }
                }
            }
        }
        Op::Tanh(x) => {
            if let Some(s) = slot(before, *x) {
                for ((s, g), y) in s.iter_mut().zip(g).zip(y) {
                    *s += g * (1.0 - y * y);
                }
            }
        }
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = val(before, *x).axis_split(*axis, "softmax").unwrap();
            if let Some(s) = slot(before, *x) {
                kernels::softmax_grad(y, g, s, outer, len, inner);
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let h = xhat.len() / inv_std.len();
            let gd = val(before, *gain).data().to_vec();
            if let Some(s) = slot(before, *x) {
                kernels::layer_norm_grad_input(g, xhat, inv_std, &gd, s, h);
            }
            if let Some(s) = slot(before, *gain) {
                for (gr, xr) in g.chunks_exact(h).zip(xhat.chunks_exact(h)) {
                    for ((s, g), x) in s.iter_mut().zip(gr).zip(xr) {
                        *s += g * x;
                    }
                }
            }
            if let Some(s) = slot(before, *bias) {
                for gr in g.chunks_exact(h) {
                    kernels::axpy(s, gr, 1.0);
                }
            }
        }
        Op::Conv1d { x, filters, pad_left } => {
            let (len, c) = (val(before, *x).shape()[0], val(before, *x).shape()[1]);
            let (k, w) = (val(before, *filters).shape()[0], val(before, *filters).shape()[1]);
            let out_len = node.value.shape()[0];
            let geom = kernels::ConvGeometry {
                len,
                channels: c,
                filters: k,
                width: w,
                pad_left: *pad_left,
                out_len,
            };
            if val(before, *x).requires_grad() {
                let fd = val(before, *filters).data().to_vec();
                kernels::conv1d_grad_input(g, &fd, slot(before, *x).unwrap(), &geom);
            }
            if val(before, *filters).requires_grad() {
                let xd = val(before, *x).data().to_vec();
                kernels::conv1d_grad_filters(g, &xd, slot(before, *filters).unwrap(), &geom);
            }
        }
        Op::MaxReduce { x, argmax } => {
            if let Some(s) = slot(before, *x) {
                let f = argmax.len();
                for (j, &t) in argmax.iter().enumerate() {
                    s[t * f + j] += g[j];
                }
            }
        }
        Op::SumReduce(x) => {
            if let Some(s) = slot(before, *x) {
                let f = g.len();
                for chunk in s.chunks_exact_mut(f) {
                    kernels::axpy(chunk, g, 1.0);
                }
            }
        }
        Op::SumAll(x) => {
            if let Some(s) = slot(before, *x) {
                for s in s.iter_mut() {
                    *s += g[0];
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let base = node.value.shape();
            let outer: usize = base[..*axis].iter().product();
            let inner: usize = base[axis + 1..].iter().product();
            let total = base[*axis] * inner;
            let mut offset = 0;
            for &v in inputs {
                let block = val(before, v).shape()[*axis] * inner;
                if let Some(s) = slot(before, v) {
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + block];
                        kernels::axpy(&mut s[o * block..(o + 1) * block], src, 1.0);
                    }
                }
                offset += block;
            }
        }
        Op::Slice { x, axis, start } => {
            let size = node.value.shape()[*axis];
            let (outer, len, inner) = val(before, *x).axis_split(*axis, "split").unwrap();
            if let Some(s) = slot(before, *x) {
                for o in 0..outer {
                    let base = (o * len + start) * inner;
                    let src = &g[o * size * inner..(o + 1) * size * inner];
                    kernels::axpy(&mut s[base..base + size * inner], src, 1.0);
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(s) = slot(before, *x) {
                kernels::axpy(s, g, 1.0);
            }
        }
        Op::Transpose(x) => {
            let (r, c) = (val(before, *x).shape()[0], val(before, *x).shape()[1]);
            if let Some(s) = slot(before, *x) {
                // g is [c×r]
                for i in 0..c {
                    for j in 0..r {
                        s[j * c + i] += g[i * r + j];
                    }
                }
            }
        }
        Op::Tile(x) => {
            if let Some(s) = slot(before, *x) {
                let n = s.len();
                for (i, g) in g.iter().enumerate() {
                    s[i % n] += g;
                }
            }
        }
        Op::Embedding { table, ids } => {
            if let Some(s) = slot(before, *table) {
                let h = g.len() / ids.len();
                for (row, &id) in g.chunks_exact(h).zip(ids) {
                    kernels::axpy(&mut s[id * h..(id + 1) * h], row, 1.0);
                }
            }
        }
        Op::CrossEntropy { logits, target, probs } => {
            if let Some(s) = slot(before, *logits) {
                for (i, (s, p)) in s.iter_mut().zip(probs).enumerate() {
                    let onehot = if i == *target { 1.0 } else { 0.0 };
                    *s += g[0] * (p - onehot);
                }
            }
        }
        Op::Custom { op, inputs } => {
            let values: Vec<&ValueGrid> = inputs.iter().map(|v| val(before, *v)).collect();
            let grads = op.backward(&values, &node.value, g);
            for (&v, gi) in inputs.iter().zip(grads) {
                if let Some(s) = slot(before, v) {
                    kernels::axpy(s, &gi, 1.0);
                }
            }
        }
    }
}
