use super::kernels::{self, add_into};
use super::{Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    GroupMeanRows {
        x: Var,
        groups: Vec<Vec<usize>>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => vec![*a, *b],
            Op::MatMul(a, b) | Op::MatMulNT(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Gelu(x)
            | Op::Sigmoid(x)
            | Op::Transpose(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SumLast(x)
            | Op::Reshape(x) => vec![*x],
            Op::Softmax { x, .. }
            | Op::GroupMeanRows { x, .. }
            | Op::GatherRows { x, .. }
            | Op::SliceCols { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatRows(v) | Op::ConcatCols(v) => v.clone(),
            Op::BceWithLogits { logits, .. } | Op::SoftmaxCrossEntropy { logits, .. } => {
                vec![*logits]
            }
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Single-threaded by construction; build one tape per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a backward pass: one optional gradient per recorded node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    /// Node indices in the order backward visited them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
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

    /// Drops every node recorded after the first `len`, invalidating their
    /// handles. Lets inference reuse a tape holding bound parameters.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input; backward produces its gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor {
            shape: ta.shape().to_vec(),
            data,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `x[..., d] + bias[d]`, the only broadcast the tape supports.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let d = tx.last_dim();
        if tb.numel() != d || tb.ndim() != 1 {
            return Err(shape_err("add_row", tx, tb));
        }
        let mut out = tx.clone();
        for chunk in out.data.chunks_mut(d) {
            add_into(chunk, tb.data());
        }
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).scale(c);
        self.push(out, Op::Scale(x, c))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::gelu);
        self.push(out, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`, the shape of every `x Wᵀ` projection and of attention scores.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2("matmul_nt")?;
        let (n, k2) = tb.dims2("matmul_nt")?;
        if k != k2 {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let out = Tensor {
            shape: vec![m, n],
            data: kernels::mm_nt(ta.data(), tb.data(), m, k, n),
        };
        Ok(self.push(out, Op::MatMulNT(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        Ok(self.push(out, Op::Transpose(x)))
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.ndim() {
            return Err(TensorError::Invalid {
                op: "softmax",
                msg: format!("axis {axis} out of range for shape {:?}", tx.shape()),
            });
        }
        let len = tx.shape()[axis];
        let outer: usize = tx.shape()[..axis].iter().product();
        let inner: usize = tx.shape()[axis + 1..].iter().product();
        let data = if inner == 1 {
            kernels::softmax_lastdim(tx.data(), len)
        } else {
            let mut out = vec![0.0; tx.numel()];
            let src = tx.data();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for j in 0..len {
                        let e = (src[at(j)] - max).exp();
                        out[at(j)] = e;
                        total += e;
                    }
                    for j in 0..len {
                        out[at(j)] /= total;
                    }
                }
            }
            out
        };
        let out = Tensor {
            shape: tx.shape().to_vec(),
            data,
        };
        Ok(self.push(
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
        ))
    }

    /// Per-vector standardization over the last axis, then `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        for p in [gain, bias] {
            let tp = self.value(p);
            if tp.numel() != d || tp.ndim() != 1 {
                return Err(shape_err("layer_norm", tx, tp));
            }
        }
        if eps <= 0.0 {
            return Err(TensorError::Invalid {
                op: "layer_norm",
                msg: format!("eps must be positive, got {eps}"),
            });
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = tx.outer();
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let src = &tx.data()[r * d..(r + 1) * d];
            let mean = src.iter().sum::<f64>() / d as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (src[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let out = Tensor {
            shape: tx.shape().to_vec(),
            data: out,
        };
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Sum over the last axis: `[..., d] -> [...]`.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = t.last_dim();
        let data: Vec<f64> = t.data().chunks(d).map(|c| c.iter().sum()).collect();
        let mut shape = t.shape().to_vec();
        shape.pop();
        if shape.is_empty() {
            shape.push(1);
        }
        self.push(Tensor { shape, data }, Op::SumLast(x))
    }

    /// Row means over index groups of a matrix: `[n×d] -> [groups×d]`.
    pub fn group_mean_rows(&mut self, x: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let t = self.value(x);
        let (n, d) = t.dims2("group_mean_rows")?;
        let mut data = vec![0.0; groups.len() * d];
        for (g, idx) in groups.iter().enumerate() {
            if idx.is_empty() || idx.iter().any(|&i| i >= n) {
                return Err(TensorError::Invalid {
                    op: "group_mean_rows",
                    msg: format!("group {g} is empty or indexes past {n} rows"),
                });
            }
            let dst = &mut data[g * d..(g + 1) * d];
            for &i in idx {
                add_into(dst, t.row(i));
            }
            let inv = 1.0 / idx.len() as f64;
            dst.iter_mut().for_each(|v| *v *= inv);
        }
        let out = Tensor {
            shape: vec![groups.len(), d],
            data,
        };
        Ok(self.push(out, Op::GroupMeanRows { x, groups }))
    }

    /// Select rows of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        let (n, d) = t.dims2("gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: format!("row {bad} out of range for {n} rows"),
            });
        }
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in &idx {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor {
            shape: vec![idx.len(), d],
            data,
        };
        Ok(self.push(out, Op::GatherRows { x, idx }))
    }

    /// Stack matrices (or vectors, as single rows) vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::Invalid {
            op: "concat_rows",
            msg: "no inputs".into(),
        })?;
        let d = self.value(*first).last_dim();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.last_dim() != d || t.ndim() > 2 {
                return Err(shape_err("concat_rows", self.value(*first), t));
            }
            rows += t.outer();
            data.extend_from_slice(t.data());
        }
        let out = Tensor {
            shape: vec![rows, d],
            data,
        };
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Join matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::Invalid {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        let (m, _) = self.value(*first).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            let (rows, cols) = t.dims2("concat_cols")?;
            if rows != m {
                return Err(shape_err("concat_cols", self.value(*first), t));
            }
            widths.push(cols);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; m * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            for r in 0..m {
                data[r * total + off..r * total + off + w].copy_from_slice(t.row(r));
            }
            off += w;
        }
        let out = Tensor {
            shape: vec![m, total],
            data,
        };
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.dims2("slice_cols")?;
        if start >= end || end > n {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                msg: format!("range {start}..{end} invalid for {n} columns"),
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&t.row(r)[start..end]);
        }
        let out = Tensor {
            shape: vec![m, w],
            data,
        };
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`,
    /// evaluated as `softplus(x) - y·x`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let t = self.value(logits);
        if t.shape() != targets.shape() {
            return Err(shape_err("bce_with_logits", t, targets));
        }
        let n = t.numel() as f64;
        let total: f64 = t
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &y)| kernels::softplus(x) - y * x)
            .sum();
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::BceWithLogits {
                logits,
                targets: targets.data().to_vec(),
            },
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (b, k) = t.dims2("softmax_cross_entropy")?;
        if targets.len() != b || targets.iter().any(|&c| c >= k) {
            return Err(TensorError::Invalid {
                op: "softmax_cross_entropy",
                msg: format!("need {b} targets below {k}, got {targets:?}"),
            });
        }
        let probs = kernels::softmax_lastdim(t.data(), k);
        let mut total = 0.0;
        for (r, &c) in targets.iter().enumerate() {
            let row = t.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[c];
        }
        Ok(self.push(
            Tensor::scalar(total / b as f64),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse-mode sweep from a scalar node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_val = self.value(root);
        if root_val.numel() != 1 {
            return Err(TensorError::Invalid {
                op: "backward",
                msg: format!("root must be scalar, got shape {:?}", root_val.shape()),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut visited = Vec::new();
        grads[root.0] = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            visited.push(id);
            self.backprop_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.map(|data| Tensor {
                    shape: n.value.shape().to_vec(),
                    data,
                })
            })
            .collect();
        Ok(Gradients { grads, visited })
    }

    /// Gradient accumulator of `v`, allocated on first use.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let n = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr) => {
                self.slot(grads, $v)
            };
        }

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(*a) {
                    add_into(acc!(*a), g);
                }
                if needs(*b) {
                    add_into(acc!(*b), g);
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    add_into(acc!(*a), g);
                }
                if needs(*b) {
                    for (d, s) in acc!(*b).iter_mut().zip(g) {
                        *d -= s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if needs(*a) {
                    let ga = acc!(*a);
                    for i in 0..g.len() {
                        ga[i] += g[i] * vb[i];
                    }
                }
                if needs(*b) {
                    let gb = acc!(*b);
                    for i in 0..g.len() {
                        gb[i] += g[i] * va[i];
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if needs(*x) {
                    add_into(acc!(*x), g);
                }
                if needs(*bias) {
                    let d = self.value(*bias).numel();
                    let gb = acc!(*bias);
                    for chunk in g.chunks(d) {
                        add_into(gb, chunk);
                    }
                }
            }
            Op::Scale(x, c) => {
                for (d, s) in acc!(*x).iter_mut().zip(g) {
                    *d += c * s;
                }
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                let gx = acc!(*x);
                for i in 0..g.len() {
                    gx[i] += g[i] * kernels::gelu_grad(vx[i]);
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let gx = acc!(*x);
                for i in 0..g.len() {
                    gx[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if needs(*a) {
                    kernels::mm_nt_acc(g, tb.data(), m, n, k, acc!(*a));
                }
                if needs(*b) {
                    kernels::mm_tn_acc(ta.data(), g, k, m, n, acc!(*b));
                }
            }
            Op::MatMulNT(a, b) => {
                // C = A Bᵀ: dA = dC B, dB = dCᵀ A
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[0];
                if needs(*a) {
                    kernels::mm_acc(g, tb.data(), m, n, k, acc!(*a));
                }
                if needs(*b) {
                    kernels::mm_tn_acc(g, ta.data(), n, m, k, acc!(*b));
                }
            }
            Op::Transpose(x) => {
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let gt = kernels::transpose(g, m, n);
                add_into(acc!(*x), &gt);
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = node.value.data();
                let gx = acc!(*x);
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dotp: f64 = (0..*len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..*len {
                            gx[at(j)] += y[at(j)] * (g[at(j)] - dotp);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain).data();
                let d = gv.len();
                if needs(*gain) {
                    let gg = acc!(*gain);
                    for (gc, hc) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gc[j] * hc[j];
                        }
                    }
                }
                if needs(*bias) {
                    let gb = acc!(*bias);
                    for gc in g.chunks(d) {
                        add_into(gb, gc);
                    }
                }
                if needs(*x) {
                    let gx = acc!(*x);
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gc = &g[r * d..(r + 1) * d];
                        let hc = &xhat[r * d..(r + 1) * d];
                        let dh: Vec<f64> = (0..d).map(|j| gc[j] * gv[j]).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(hc).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += rs * (dh[j] - mean_dh - hc[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let g0 = g[0];
                acc!(*x).iter_mut().for_each(|d| *d += g0);
            }
            Op::Mean(x) => {
                let gx = acc!(*x);
                let g0 = g[0] / gx.len() as f64;
                gx.iter_mut().for_each(|d| *d += g0);
            }
            Op::SumLast(x) => {
                let d = self.value(*x).last_dim();
                let gx = acc!(*x);
                for (chunk, &gv) in gx.chunks_mut(d).zip(g) {
                    chunk.iter_mut().for_each(|v| *v += gv);
                }
            }
            Op::GroupMeanRows { x, groups } => {
                let d = node.value.shape()[1];
                let gx = acc!(*x);
                for (gi, idx) in groups.iter().enumerate() {
                    let inv = 1.0 / idx.len() as f64;
                    let src = &g[gi * d..(gi + 1) * d];
                    for &i in idx {
                        for j in 0..d {
                            gx[i * d + j] += inv * src[j];
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let d = node.value.shape()[1];
                let gx = acc!(*x);
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut gx[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if needs(p) {
                        add_into(acc!(p), &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = (node.value.shape()[0], node.value.shape()[1]);
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    if needs(p) {
                        let gp = acc!(p);
                        for r in 0..m {
                            add_into(
                                &mut gp[r * w..(r + 1) * w],
                                &g[r * total + off..r * total + off + w],
                            );
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, w) = (node.value.shape()[0], node.value.shape()[1]);
                let n = self.value(*x).shape()[1];
                let gx = acc!(*x);
                for r in 0..m {
                    add_into(
                        &mut gx[r * n + start..r * n + start + w],
                        &g[r * w..(r + 1) * w],
                    );
                }
            }
            Op::Reshape(x) => add_into(acc!(*x), g),
            Op::BceWithLogits { logits, targets } => {
                let xs = self.value(*logits).data();
                let scale = g[0] / xs.len() as f64;
                let gx = acc!(*logits);
                for i in 0..xs.len() {
                    gx[i] += scale * (kernels::sigmoid(xs[i]) - targets[i]);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let k = self.value(*logits).last_dim();
                let scale = g[0] / targets.len() as f64;
                let gx = acc!(*logits);
                for (r, &c) in targets.iter().enumerate() {
                    for j in 0..k {
                        let onehot = if j == c { 1.0 } else { 0.0 };
                        gx[r * k + j] += scale * (probs[r * k + j] - onehot);
                    }
                }
            }
        }
    }
}
