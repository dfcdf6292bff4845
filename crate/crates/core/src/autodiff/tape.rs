//! Reverse-mode gradient tape.
//!
//! Every operation appends a node holding its output value and the inputs it
//! was computed from. Nodes are appended in evaluation order, so the node list
//! is already a topological order and `backward` is a single reverse sweep.
//! Operations whose inputs are all constants are stored as constants: they
//! carry a value but no backward rule.

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, Var),
    MulConst(Var, f64),
    AddConst(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    SliceRows {
        src: Var,
        start: usize,
    },
    SliceCols {
        src: Var,
        start: usize,
    },
    Transpose(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Mean(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    NormalizeRows {
        src: Var,
        norms: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Const => vec![],
            MatMul(a, b) | Add(a, b) | AddRow(a, b) | Mul(a, b) | Scale(a, b) => vec![*a, *b],
            MulConst(a, _)
            | AddConst(a)
            | Transpose(a)
            | Softmax(a)
            | Gelu(a)
            | Tanh(a)
            | Sigmoid(a)
            | Exp(a)
            | Mean(a)
            | Sum(a) => vec![*a],
            Concat { parts, .. } => parts.clone(),
            SliceRows { src, .. } | SliceCols { src, .. } | NormalizeRows { src, .. } => {
                vec![*src]
            }
            Embedding { table, .. } => vec![*table],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// A single-use recording of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
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

    /// Leaf that participates in differentiation.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let op = if requires_grad { Op::Leaf } else { Op::Const };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
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

    /// Gradient of the last `backward` call. `None` for constants and for
    /// anything that is not a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        let node = &self.nodes[v.0];
        if !matches!(node.op, Op::Leaf) {
            return None;
        }
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Const };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- forward primitives ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    /// Elementwise sum. `b` may also be a row vector broadcast over the rows
    /// of `a` (bias addition); no other broadcasting is supported.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
            return Ok(self.push(Tensor::new(sa, data)?, Op::Add(a, b)));
        }
        let (rows, cols) = self.value(a).dims2();
        let (br, bc) = self.value(b).dims2();
        if br == 1 && bc == cols && sa.len() == 2 {
            let bias = self.value(b).data();
            let mut data = self.value(a).data().to_vec();
            for r in 0..rows {
                for c in 0..cols {
                    data[r * cols + c] += bias[c];
                }
            }
            return Ok(self.push(Tensor::new(sa, data)?, Op::AddRow(a, b)));
        }
        Err(Error::shape("add", &sa, &sb))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("elementwise_mul", self.shape(a), self.shape(b)));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b)))
    }

    /// Multiplies every element of `a` by the single-element tensor `s`.
    pub fn scale(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("scalar_mul", self.shape(a), self.shape(s)));
        }
        let k = self.value(s).item();
        let value = self.value(a).map(|x| x * k);
        Ok(self.push(value, Op::Scale(a, s)))
    }

    pub fn mul_const(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| x * k);
        self.push(value, Op::MulConst(a, k))
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| x + k);
        self.push(value, Op::AddConst(a))
    }

    /// Concatenates rank-2 tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::Contract(format!(
                "concat needs at least one part and axis 0 or 1 (got axis {axis})"
            )));
        }
        let dims: Vec<(usize, usize)> = parts.iter().map(|&p| self.value(p).dims2()).collect();
        let (r0, c0) = dims[0];
        for (i, &(r, c)) in dims.iter().enumerate().skip(1) {
            let ok = if axis == 0 { c == c0 } else { r == r0 };
            if !ok {
                return Err(Error::shape("concat", self.shape(parts[0]), self.shape(parts[i])));
            }
        }
        let (shape, data) = if axis == 0 {
            let rows: usize = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(rows * c0);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            (vec![rows, c0], data)
        } else {
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for r in 0..r0 {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row_slice(r));
                }
            }
            (vec![r0, cols], data)
        };
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Convenience for `concat(parts, 1)`.
    pub fn concat_last_axis(&mut self, parts: &[Var]) -> Result<Var> {
        self.concat(parts, 1)
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(src).dims2();
        if len == 0 || start + len > rows {
            return Err(Error::Contract(format!(
                "slice_rows {start}..{} out of range for {rows} rows",
                start + len
            )));
        }
        let data = self.value(src).data()[start * cols..(start + len) * cols].to_vec();
        Ok(self.push(Tensor::new(vec![len, cols], data)?, Op::SliceRows { src, start }))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(src).dims2();
        if len == 0 || start + len > cols {
            return Err(Error::Contract(format!(
                "slice_cols {start}..{} out of range for {cols} columns",
                start + len
            )));
        }
        let v = self.value(src);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&v.row_slice(r)[start..start + len]);
        }
        Ok(self.push(Tensor::new(vec![rows, len], data)?, Op::SliceCols { src, start }))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.value(a).dims2();
        let v = self.value(a).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = v[i * c + j];
            }
        }
        self.push(
            Tensor::new(vec![c, r], data).expect("transpose shape"),
            Op::Transpose(a),
        )
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, dim) = self.value(table).dims2();
        if ids.is_empty() {
            return Err(Error::Contract("embedding lookup with no ids".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Contract(format!(
                    "embedding id {id} out of range for vocabulary of {vocab}"
                )));
            }
            data.extend_from_slice(self.value(table).row_slice(id));
        }
        Ok(self.push(
            Tensor::new(vec![ids.len(), dim], data)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of length `cols`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2();
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(Error::shape("layernorm", self.shape(x), self.shape(gamma)));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYERNORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Softmax over the last axis. `mask` (same length as `x`, row-major) marks
    /// entries that may receive weight; masked entries get exactly zero.
    pub fn softmax_masked(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2();
        if let Some(m) = mask {
            if m.len() != rows * cols {
                return Err(Error::shape("softmax_last_axis_masked", self.shape(x), &[m.len()]));
            }
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let keep = |c: usize| mask.is_none_or(|m| m[r * cols + c]);
            let mut max = f64::NEG_INFINITY;
            for c in 0..cols {
                if keep(c) {
                    max = max.max(xv[r * cols + c]);
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateMask {
                    op: "softmax_last_axis_masked",
                    row: r,
                });
            }
            let mut total = 0.0;
            for c in 0..cols {
                if keep(c) {
                    let e = (xv[r * cols + c] - max).exp();
                    out[r * cols + c] = e;
                    total += e;
                }
            }
            for c in 0..cols {
                out[r * cols + c] /= total;
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(x)))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_masked(x, None)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        self.push(value, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        self.push(value, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        self.push(value, Op::Exp(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Mean softmax cross-entropy of `logits` (`[batch, classes]`) against
    /// integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(logits).dims2();
        if labels.len() != rows {
            return Err(Error::shape(
                "cross_entropy_with_logits",
                self.shape(logits),
                &[labels.len()],
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::Contract(format!("label {bad} out of range for {cols} classes")));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; rows * cols];
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &lv[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + total.ln();
            for c in 0..cols {
                probs[r * cols + c] = (row[c] - log_z).exp();
            }
            loss += log_z - row[labels[r]];
        }
        loss /= rows as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, src: Var) -> Result<Var> {
        let (rows, cols) = self.value(src).dims2();
        let v = self.value(src).data();
        let mut norms = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &v[r * cols..(r + 1) * cols];
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::NumericInstability(format!(
                    "row {r} has zero norm and cannot be normalized"
                )));
            }
            norms[r] = n;
            for c in 0..cols {
                out[r * cols + c] = row[c] / n;
            }
        }
        let shape = self.shape(src).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::NormalizeRows { src, norms }))
    }

    // ---- reverse sweep ----

    /// Propagates d(loss)/d(node) back to every leaf. Leaves that requires
    /// gradients but are unreachable from `loss` receive zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(upstream);
                continue;
            }
            self.backward_node(idx, &upstream, &mut grads);
        }
        self.grads = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| match node.op {
                Op::Leaf => Some(match grads[i].take() {
                    Some(g) => Tensor::new(node.value.shape().to_vec(), g).expect("gradient shape matches value"),
                    None => Tensor::zeros(node.value.shape()),
                }),
                _ => None,
            })
            .collect();
        Ok(())
    }

    fn backward_node(&self, idx: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let mut send = |v: Var, g: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let (_, n) = self.value(*b).dims2();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.nodes[a.0].requires_grad {
                    // dA = dY · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += dy[i * n + j] * bv[p * n + j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    send(*a, da);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = Aᵀ · dY
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += aip * dy[i * n + j];
                            }
                        }
                    }
                    send(*b, db);
                }
            }
            Op::Add(a, b) => {
                send(*a, dy.to_vec());
                send(*b, dy.to_vec());
            }
            Op::AddRow(a, b) => {
                send(*a, dy.to_vec());
                let cols = self.value(*b).len();
                let mut db = vec![0.0; cols];
                for (i, g) in dy.iter().enumerate() {
                    db[i % cols] += g;
                }
                send(*b, db);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                send(*a, zip_map(dy, bv, |g, y| g * y));
                send(*b, zip_map(dy, av, |g, x| g * x));
            }
            Op::Scale(a, s) => {
                let k = self.value(*s).item();
                let av = self.value(*a).data();
                send(*a, dy.iter().map(|g| g * k).collect());
                let ds: f64 = dy.iter().zip(av).map(|(g, x)| g * x).sum();
                send(*s, vec![ds]);
            }
            Op::MulConst(a, k) => send(*a, dy.iter().map(|g| g * k).collect()),
            Op::AddConst(a) => send(*a, dy.to_vec()),
            Op::Concat { parts, axis } => {
                let (_, total_cols) = node.value.dims2();
                let mut row_offset = 0;
                let mut col_offset = 0;
                for &p in parts {
                    let (r, c) = self.value(p).dims2();
                    let mut g = Vec::with_capacity(r * c);
                    if *axis == 0 {
                        g.extend_from_slice(&dy[row_offset * c..(row_offset + r) * c]);
                        row_offset += r;
                    } else {
                        for row in 0..r {
                            let base = row * total_cols + col_offset;
                            g.extend_from_slice(&dy[base..base + c]);
                        }
                        col_offset += c;
                    }
                    send(p, g);
                }
            }
            Op::SliceRows { src, start } => {
                let (_, cols) = self.value(*src).dims2();
                let mut g = vec![0.0; self.value(*src).len()];
                g[start * cols..start * cols + dy.len()].copy_from_slice(dy);
                send(*src, g);
            }
            Op::SliceCols { src, start } => {
                let (rows, cols) = self.value(*src).dims2();
                let len = dy.len() / rows;
                let mut g = vec![0.0; rows * cols];
                for r in 0..rows {
                    g[r * cols + start..r * cols + start + len].copy_from_slice(&dy[r * len..(r + 1) * len]);
                }
                send(*src, g);
            }
            Op::Transpose(a) => {
                // node value is [c, r]; dA[i][j] = dY[j][i]
                let (r, c) = self.value(*a).dims2();
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        g[i * c + j] = dy[j * r + i];
                    }
                }
                send(*a, g);
            }
            Op::Embedding { table, ids } => {
                let (vocab, dim) = self.value(*table).dims2();
                let mut g = vec![0.0; vocab * dim];
                for (row, &id) in ids.iter().enumerate() {
                    for c in 0..dim {
                        g[id * dim + c] += dy[row * dim + c];
                    }
                }
                send(*table, g);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = self.value(*x).dims2();
                let gv = self.value(*gamma).data();
                let mut dx = vec![0.0; rows * cols];
                let mut dg = vec![0.0; cols];
                let mut db = vec![0.0; cols];
                let n = cols as f64;
                #[allow(clippy::needless_range_loop)]
                for r in 0..rows {
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for c in 0..cols {
                        let i = r * cols + c;
                        let dh = dy[i] * gv[c];
                        sum_dh += dh;
                        sum_dh_h += dh * xhat[i];
                        dg[c] += dy[i] * xhat[i];
                        db[c] += dy[i];
                    }
                    for c in 0..cols {
                        let i = r * cols + c;
                        let dh = dy[i] * gv[c];
                        dx[i] = inv_std[r] / n * (n * dh - sum_dh - xhat[i] * sum_dh_h);
                    }
                }
                send(*x, dx);
                send(*gamma, dg);
                send(*beta, db);
            }
            Op::Softmax(x) => {
                let (rows, cols) = node.value.dims2();
                let mut g = vec![0.0; rows * cols];
                for r in 0..rows {
                    let y = &out[r * cols..(r + 1) * cols];
                    let d = &dy[r * cols..(r + 1) * cols];
                    let dot: f64 = y.iter().zip(d).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        g[r * cols + c] = y[c] * (d[c] - dot);
                    }
                }
                send(*x, g);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                send(*x, zip_map(dy, xv, |g, v| g * gelu_grad(v)));
            }
            Op::Tanh(x) => send(*x, zip_map(dy, out, |g, y| g * (1.0 - y * y))),
            Op::Sigmoid(x) => send(*x, zip_map(dy, out, |g, y| g * y * (1.0 - y))),
            Op::Exp(x) => send(*x, zip_map(dy, out, |g, y| g * y)),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                send(*x, vec![dy[0] / n as f64; n]);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                send(*x, vec![dy[0]; n]);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let (rows, cols) = self.value(*logits).dims2();
                let scale = dy[0] / rows as f64;
                let mut g = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    g[r * cols + l] -= 1.0;
                }
                for v in &mut g {
                    *v *= scale;
                }
                send(*logits, g);
            }
            Op::NormalizeRows { src, norms } => {
                let (rows, cols) = node.value.dims2();
                let mut g = vec![0.0; rows * cols];
                for r in 0..rows {
                    let y = &out[r * cols..(r + 1) * cols];
                    let d = &dy[r * cols..(r + 1) * cols];
                    let dot: f64 = y.iter().zip(d).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        g[r * cols + c] = (d[c] - y[c] * dot) / norms[r];
                    }
                }
                send(*src, g);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    out
}

/// Lower-triangular mask for a sequence of `len` tokens: position `i` may
/// attend to positions `0..=i`.
pub fn causal_mask(len: usize) -> Vec<bool> {
    (0..len * len).map(|k| k % len <= k / len).collect()
}
