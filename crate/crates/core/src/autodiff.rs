//! Tape-style reverse-mode automatic differentiation.
//!
//! Nodes are appended in construction order, so the node list is always a
//! valid topological order and [`Graph::backward`] simply walks it in reverse.
//! Shapes are at most 2-D; a 1-D vector of length `n` behaves as a `1 x n` row
//! wherever an op needs rows and columns.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub type NodeId = usize;

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, S),
    Relu(NodeId),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    Dropout(NodeId, Vec<S>),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<S>,
    },
    Gather(NodeId, Vec<usize>),
    SliceCols(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    Sum(NodeId),
}

#[derive(Clone, Debug)]
struct Node<S> {
    op: Op<S>,
    shape: Vec<usize>,
    value: Vec<S>,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => (shape[..shape.len() - 1].iter().product(), shape[shape.len() - 1]),
    }
}

/// `out[m x n] += a[m x k] * b[k x n]`
fn mm_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out[m x k] += a[m x n] * b[k x n]^T`
fn mm_bt_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = S::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s = s + x * y;
            }
            out[i * k + p] = out[i * k + p] + s;
        }
    }
}

/// `out[k x n] += a[m x k]^T * b[m x n]`
fn mm_at_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<S>, shape: Vec<usize>, value: Vec<S>, requires_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, t: &Tensor) -> NodeId {
        let v = t.data().iter().map(|&x| S::of_f32(x)).collect();
        self.push(Op::Leaf, t.shape().to_vec(), v, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        let v = t.data().iter().map(|&x| S::of_f32(x)).collect();
        self.push(Op::Leaf, t.shape().to_vec(), v, false)
    }

    pub fn input(&mut self, shape: &[usize], value: Vec<S>, requires_grad: bool) -> Result<NodeId> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::dim("input", shape, &[value.len()]));
        }
        Ok(self.push(Op::Leaf, shape.to_vec(), value, requires_grad))
    }

    pub fn value(&self, id: NodeId) -> &[S] {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn grad(&self, id: NodeId) -> Option<&[S]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    /// Copies a node's value into an `f32` tensor.
    pub fn to_tensor(&self, id: NodeId, name: &str) -> Tensor {
        let n = &self.nodes[id];
        Tensor::new(name, &n.shape, n.value.iter().map(|v| v.as_f32()).collect())
            .expect("node shapes are consistent")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        mm_acc(&self.nodes[a].value, &self.nodes[b].value, &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), vec![m, n], out, rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = &self.nodes[a].shape;
        if sa.len() != 2 {
            return Err(Error::dim("transpose", sa, &[]));
        }
        let (m, n) = (sa[0], sa[1]);
        let v = &self.nodes[a].value;
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Transpose(a), vec![n, m], out, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let out = zip_map(&self.nodes[a].value, &self.nodes[b].value, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(Op::Add(a, b), shape, out, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(&self.nodes[a].value, &self.nodes[b].value, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(Op::Mul(a, b), shape, out, rg))
    }

    /// Broadcasts a length-`n` vector over every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (_, n) = rows_cols(&self.nodes[a].shape);
        if self.nodes[bias].value.len() != n {
            return Err(Error::dim("add_row", &self.nodes[a].shape, &self.nodes[bias].shape));
        }
        let bv = &self.nodes[bias].value;
        let out: Vec<S> = self.nodes[a]
            .value
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % n])
            .collect();
        let rg = self.rg(&[a, bias]);
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(Op::AddRow(a, bias), shape, out, rg))
    }

    /// `x * w + b` for `x: m x k`, `w: k x n`, `b: n`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let h = self.matmul(x, w)?;
        self.add_row(h, b)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let s = S::of_f64(s);
        let out = self.nodes[a].value.iter().map(|&x| x * s).collect();
        let rg = self.rg(&[a]);
        let shape = self.nodes[a].shape.clone();
        self.push(Op::Scale(a, s), shape, out, rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a].value.iter().map(|&x| x.max(S::zero())).collect();
        let rg = self.rg(&[a]);
        let shape = self.nodes[a].shape.clone();
        self.push(Op::Relu(a), shape, out, rg)
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let (m, n) = rows_cols(&self.nodes[a].shape);
        let v = &self.nodes[a].value;
        let mut out = vec![S::zero(); m * n];
        for r in 0..m {
            let row = &v[r * n..(r + 1) * n];
            let max = row.iter().fold(S::neg_infinity(), |acc, &x| acc.max(x));
            let mut sum = S::zero();
            for (o, &x) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (x - max).exp();
                sum = sum + *o;
            }
            for o in &mut out[r * n..(r + 1) * n] {
                *o = *o / sum;
            }
        }
        let rg = self.rg(&[a]);
        let shape = self.nodes[a].shape.clone();
        self.push(Op::Softmax(a), shape, out, rg)
    }

    /// Per-row normalization to zero mean and unit variance, then `gain * x + bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (m, d) = rows_cols(&self.nodes[x].shape);
        if self.nodes[gain].value.len() != d || self.nodes[bias].value.len() != d {
            return Err(Error::dim("layer_norm", &self.nodes[x].shape, &self.nodes[gain].shape));
        }
        let eps = S::of_f64(eps);
        let dn = S::from_usize(d).unwrap();
        let xv = &self.nodes[x].value;
        let (gv, bv) = (&self.nodes[gain].value, &self.nodes[bias].value);
        let mut xhat = vec![S::zero(); m * d];
        let mut inv_std = vec![S::zero(); m];
        let mut out = vec![S::zero(); m * d];
        for r in 0..m {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().fold(S::zero(), |a, &v| a + v) / dn;
            let var = row.iter().fold(S::zero(), |a, &v| a + (v - mean) * (v - mean)) / dn;
            let is = S::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = gv[j] * h + bv[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        let shape = self.nodes[x].shape.clone();
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            shape,
            out,
            rg,
        ))
    }

    /// Inverted dropout. Identity (the same node) in eval mode or when `p == 0`.
    pub fn dropout<R: Rng>(&mut self, a: NodeId, p: f64, training: bool, rng: &mut R) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let keep = S::of_f64(1.0 / (1.0 - p));
        let mask: Vec<S> = (0..self.nodes[a].value.len())
            .map(|_| if rng.gen::<f64>() < p { S::zero() } else { keep })
            .collect();
        let out = zip_map(&self.nodes[a].value, &mask, |x, m| x * m);
        let rg = self.rg(&[a]);
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(Op::Dropout(a, mask), shape, out, rg))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (b, c) = rows_cols(&self.nodes[logits].shape);
        if targets.len() != b {
            return Err(Error::dim("cross_entropy", &self.nodes[logits].shape, &[targets.len()]));
        }
        if c < 2 {
            return Err(Error::Config(format!("cross_entropy needs >= 2 classes, got {c}")));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Data(format!("target {t} out of range for {c} classes")));
        }
        let v = &self.nodes[logits].value;
        let mut probs = vec![S::zero(); b * c];
        let mut loss = S::zero();
        for r in 0..b {
            let row = &v[r * c..(r + 1) * c];
            let max = row.iter().fold(S::neg_infinity(), |a, &x| a.max(x));
            let sum = row.iter().fold(S::zero(), |a, &x| a + (x - max).exp());
            let lse = max + sum.ln();
            loss = loss + lse - row[targets[r]];
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
        }
        let loss = loss / S::from_usize(b).unwrap();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            vec![1],
            vec![loss],
            rg,
        ))
    }

    /// Selects rows of a 2-D table by index (embedding lookup, row picking).
    pub fn gather(&mut self, table: NodeId, rows: &[usize]) -> Result<NodeId> {
        let (m, n) = rows_cols(&self.nodes[table].shape);
        if let Some(&r) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::Data(format!("row index {r} out of range for {m} rows")));
        }
        if rows.is_empty() {
            return Err(Error::Data("gather with no rows".into()));
        }
        let tv = &self.nodes[table].value;
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(&tv[r * n..(r + 1) * n]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(Op::Gather(table, rows.to_vec()), vec![rows.len(), n], out, rg))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = rows_cols(&self.nodes[a].shape);
        if start + len > n || len == 0 {
            return Err(Error::dim("slice_cols", &self.nodes[a].shape, &[start, len]));
        }
        let v = &self.nodes[a].value;
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&v[r * n + start..r * n + start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Op::SliceCols(a, start), vec![m, len], out, rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(Error::Config("concat_cols of nothing".into()));
        };
        let (m, _) = rows_cols(&self.nodes[first].shape);
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = rows_cols(&self.nodes[p].shape);
            if pm != m {
                return Err(Error::dim("concat_cols", &self.nodes[first].shape, &self.nodes[p].shape));
            }
            total += pn;
        }
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                let (_, pn) = rows_cols(&self.nodes[p].shape);
                out.extend_from_slice(&self.nodes[p].value[r * pn..(r + 1) * pn]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Op::ConcatCols(parts.to_vec()), vec![m, total], out, rg))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a].value.iter().fold(S::zero(), |acc, &x| acc + x);
        let rg = self.rg(&[a]);
        self.push(Op::Sum(a), vec![1], vec![s], rg)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(Error::dim(op, &self.nodes[a].shape, &self.nodes[b].shape));
        }
        Ok(())
    }

    /// Back-propagates from a scalar node. Gradients of earlier calls are discarded.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss].value.len() != 1 {
            return Err(Error::dim("backward", &self.nodes[loss].shape, &[1]));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss] = Some(vec![S::one()]);
        for id in (0..=loss).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[id].take() else {
                continue;
            };
            self.backward_node(id, &gout);
            self.grads[id] = Some(gout);
        }
        Ok(())
    }

    fn acc(&mut self, id: NodeId, f: impl FnOnce(&mut [S])) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let n: usize = self.nodes[id].shape.iter().product();
        let g = self.grads[id].get_or_insert_with(|| vec![S::zero(); n]);
        f(g);
    }

    fn backward_node(&mut self, id: NodeId, gout: &[S]) {
        // Op payloads are moved out for the duration so inputs can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                let bv = std::mem::take(&mut self.nodes[*b].value);
                self.acc(*a, |g| mm_bt_acc(gout, &bv, g, m, n, k));
                self.nodes[*b].value = bv;
                let av = std::mem::take(&mut self.nodes[*a].value);
                self.acc(*b, |g| mm_at_acc(&av, gout, g, m, k, n));
                self.nodes[*a].value = av;
            }
            Op::Transpose(a) => {
                let (m, n) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                self.acc(*a, |g| {
                    for i in 0..m {
                        for j in 0..n {
                            g[i * n + j] = g[i * n + j] + gout[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(*a, |g| add_into(g, gout));
                self.acc(*b, |g| add_into(g, gout));
            }
            Op::AddRow(a, bias) => {
                self.acc(*a, |g| add_into(g, gout));
                let n = self.nodes[*bias].value.len();
                self.acc(*bias, |g| {
                    for (i, &v) in gout.iter().enumerate() {
                        g[i % n] = g[i % n] + v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let bv = self.nodes[*b].value.clone();
                let av = self.nodes[*a].value.clone();
                self.acc(*a, |g| {
                    for ((gi, &go), &y) in g.iter_mut().zip(gout).zip(&bv) {
                        *gi = *gi + go * y;
                    }
                });
                self.acc(*b, |g| {
                    for ((gi, &go), &x) in g.iter_mut().zip(gout).zip(&av) {
                        *gi = *gi + go * x;
                    }
                });
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc(*a, |g| {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi = *gi + go * s;
                    }
                });
            }
            Op::Relu(a) => {
                let xv = std::mem::take(&mut self.nodes[*a].value);
                self.acc(*a, |g| {
                    for ((gi, &go), &x) in g.iter_mut().zip(gout).zip(&xv) {
                        if x > S::zero() {
                            *gi = *gi + go;
                        }
                    }
                });
                self.nodes[*a].value = xv;
            }
            Op::Softmax(a) => {
                let (m, n) = rows_cols(&self.nodes[id].shape);
                let y = &self.nodes[id].value;
                let mut dx = vec![S::zero(); m * n];
                for r in 0..m {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &gout[r * n..(r + 1) * n];
                    let dot = yr.iter().zip(gr).fold(S::zero(), |acc, (&p, &q)| acc + p * q);
                    for j in 0..n {
                        dx[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(*a, |g| add_into(g, &dx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, d) = rows_cols(&self.nodes[*x].shape);
                let dn = S::from_usize(d).unwrap();
                let gv = self.nodes[*gain].value.clone();
                self.acc(*gain, |g| {
                    for (i, &go) in gout.iter().enumerate() {
                        g[i % d] = g[i % d] + go * xhat[i];
                    }
                });
                self.acc(*bias, |g| {
                    for (i, &go) in gout.iter().enumerate() {
                        g[i % d] = g[i % d] + go;
                    }
                });
                self.acc(*x, |g| {
                    for r in 0..m {
                        let range = r * d..(r + 1) * d;
                        let xh = &xhat[range.clone()];
                        let go = &gout[range.clone()];
                        let mut sum_dxh = S::zero();
                        let mut sum_dxh_xh = S::zero();
                        for j in 0..d {
                            let dxh = go[j] * gv[j];
                            sum_dxh = sum_dxh + dxh;
                            sum_dxh_xh = sum_dxh_xh + dxh * xh[j];
                        }
                        let k = inv_std[r] / dn;
                        for j in 0..d {
                            let dxh = go[j] * gv[j];
                            g[r * d + j] = g[r * d + j] + k * (dn * dxh - sum_dxh - xh[j] * sum_dxh_xh);
                        }
                    }
                });
            }
            Op::Dropout(a, mask) => {
                self.acc(*a, |g| {
                    for ((gi, &go), &mk) in g.iter_mut().zip(gout).zip(mask) {
                        *gi = *gi + go * mk;
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let b = targets.len();
                let c = probs.len() / b;
                let scale = gout[0] / S::from_usize(b).unwrap();
                self.acc(*logits, |g| {
                    for r in 0..b {
                        for j in 0..c {
                            let onehot = if j == targets[r] { S::one() } else { S::zero() };
                            g[r * c + j] = g[r * c + j] + (probs[r * c + j] - onehot) * scale;
                        }
                    }
                });
            }
            Op::Gather(table, rows) => {
                let (_, n) = rows_cols(&self.nodes[*table].shape);
                self.acc(*table, |g| {
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..n {
                            g[r * n + j] = g[r * n + j] + gout[i * n + j];
                        }
                    }
                });
            }
            Op::SliceCols(a, start) => {
                let (m, n) = rows_cols(&self.nodes[*a].shape);
                let len = self.nodes[id].shape[1];
                let start = *start;
                self.acc(*a, |g| {
                    for r in 0..m {
                        for j in 0..len {
                            g[r * n + start + j] = g[r * n + start + j] + gout[r * len + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (m, total) = rows_cols(&self.nodes[id].shape);
                let mut offset = 0;
                for &p in parts {
                    let (_, pn) = rows_cols(&self.nodes[p].shape);
                    self.acc(p, |g| {
                        for r in 0..m {
                            for j in 0..pn {
                                g[r * pn + j] = g[r * pn + j] + gout[r * total + offset + j];
                            }
                        }
                    });
                    offset += pn;
                }
            }
            Op::Sum(a) => {
                let go = gout[0];
                self.acc(*a, |g| g.iter_mut().for_each(|v| *v = *v + go));
            }
        }
        self.nodes[id].op = op;
    }
}

fn zip_map<S: Scalar>(a: &[S], b: &[S], f: impl Fn(S, S) -> S) -> Vec<S> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into<S: Scalar>(g: &mut [S], src: &[S]) {
    for (gi, &s) in g.iter_mut().zip(src) {
        *gi = *gi + s;
    }
}
