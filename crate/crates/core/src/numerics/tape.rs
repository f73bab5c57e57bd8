//! Reverse-mode differentiation over a Wengert list.
//!
//! A [`Tape`] owns every intermediate tensor of one forward pass. Ops are
//! appended in evaluation order; [`Tape::backward`] walks the list in reverse
//! and accumulates gradients into every node that (transitively) depends on a
//! leaf created with `requires_grad = true`.

use std::sync::Arc;

use super::kernels::{self, RopeAngles};
use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulCol(Var, Var),
    MulRow(Var, Var),
    RowDot(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Sigmoid(Var),
    Silu(Var),
    Softmax(Var),
    Sum(Var),
    RmsNorm {
        x: Var,
        scale: Var,
        group: usize,
        inv: Vec<T>,
    },
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
    CausalConv {
        x: Var,
        w: Var,
    },
    Rope {
        x: Var,
        angles: Arc<RopeAngles<T>>,
        head_dim: usize,
        start: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<V>(op: &'static str, a: &[usize], b: &[usize]) -> Result<V> {
    Err(Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    })
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => shape_err(op, s, &[0, 0]),
        }
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return shape_err("matmul", self.shape(a), self.shape(b));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::from_vec(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.value(a).same_shape(self.value(b), op)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_vec(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let mut t = self.value(a).clone();
        t.scale(s);
        self.push(t, Op::Scale(a, s), &[a])
    }

    /// Multiply each row `i` of `x [n,c]` by `g[i]`, `g: [n,1]`.
    pub fn mul_col(&mut self, x: Var, g: Var) -> Result<Var> {
        let (n, c) = self.dims2(x, "mul_col")?;
        if self.shape(g) != [n, 1] {
            return shape_err("mul_col", self.shape(x), self.shape(g));
        }
        let gv = self.value(g).data().to_vec();
        let mut t = self.value(x).clone();
        for (i, row) in t.data_mut().chunks_mut(c).enumerate() {
            row.iter_mut().for_each(|v| *v *= gv[i]);
        }
        Ok(self.push(t, Op::MulCol(x, g), &[x, g]))
    }

    /// Multiply every row of `x [n,c]` elementwise by `s [c]`.
    pub fn mul_row(&mut self, x: Var, s: Var) -> Result<Var> {
        let (_, c) = self.dims2(x, "mul_row")?;
        if self.shape(s) != [c] {
            return shape_err("mul_row", self.shape(x), self.shape(s));
        }
        let sv = self.value(s).data().to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(c) {
            row.iter_mut().zip(&sv).for_each(|(v, &w)| *v *= w);
        }
        Ok(self.push(t, Op::MulRow(x, s), &[x, s]))
    }

    /// Row-wise dot product `[n,c] . [n,c] -> [n,1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b), "row_dot")?;
        let (n, c) = self.dims2(a, "row_dot")?;
        let data = self
            .value(a)
            .data()
            .chunks(c)
            .zip(self.value(b).data().chunks(c))
            .map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| p * q).sum())
            .collect();
        let t = Tensor::from_vec(vec![n, 1], data)?;
        Ok(self.push(t, Op::RowDot(a, b), &[a, b]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.dims2(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != n {
                return shape_err("concat_cols", self.shape(parts[0]), self.shape(p));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::from_vec(vec![n, total], data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.dims2(parts[0], "concat_rows")?.1;
        let mut data = Vec::new();
        let mut n = 0;
        for &p in parts {
            let (r, pc) = self.dims2(p, "concat_rows")?;
            if pc != c {
                return shape_err("concat_rows", self.shape(parts[0]), self.shape(p));
            }
            n += r;
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::from_vec(vec![n, c], data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Rows `start..end` of a 2D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, c) = self.dims2(x, "slice_rows")?;
        if start > end || end > n {
            return Err(Error::OutOfRange {
                what: "slice end",
                value: end,
                limit: n,
            });
        }
        let data = self.value(x).data()[start * c..end * c].to_vec();
        let t = Tensor::from_vec(vec![end - start, c], data)?;
        Ok(self.push(t, Op::SliceRows(x, start), &[x]))
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = self.value(x);
        Tensor::from_vec(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect())
            .expect("same shape")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, kernels::sigmoid);
        self.push(t, Op::Sigmoid(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.map(x, kernels::silu);
        self.push(t, Op::Silu(x), &[x])
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        let c = t.shape().last().copied().unwrap_or(1);
        for row in t.data_mut().chunks_mut(c) {
            kernels::softmax_in_place(row);
        }
        self.push(t, Op::Softmax(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// RMS normalization of each row of `x [n,c]` in groups of `group`
    /// channels, with a learnable scale of length `group`.
    pub fn rms_norm(&mut self, x: Var, scale: Var, group: usize) -> Result<Var> {
        let (n, c) = self.dims2(x, "rms_norm")?;
        if group == 0 || c % group != 0 || self.shape(scale) != [group] {
            return shape_err("rms_norm", self.shape(x), self.shape(scale));
        }
        let groups = c / group;
        let mut out = vec![T::zero(); n * c];
        let mut inv = vec![T::zero(); n * groups];
        {
            let xv = self.value(x).data();
            let sv = self.value(scale).data();
            for i in 0..n {
                kernels::rms_norm_row(
                    &xv[i * c..(i + 1) * c],
                    sv,
                    group,
                    &mut out[i * c..(i + 1) * c],
                    &mut inv[i * groups..(i + 1) * groups],
                );
            }
        }
        let t = Tensor::from_vec(vec![n, c], out)?;
        Ok(self.push(t, Op::RmsNorm { x, scale, group, inv }, &[x, scale]))
    }

    /// Gather `table` rows: `[M,d] -> [len(rows), d]`.
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (m, d) = self.dims2(table, "gather")?;
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= m {
                return Err(Error::OutOfRange {
                    what: "gather row",
                    value: r,
                    limit: m,
                });
            }
            data.extend_from_slice(self.value(table).row(r));
        }
        let t = Tensor::from_vec(vec![rows.len(), d], data)?;
        Ok(self.push(
            t,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
            &[table],
        ))
    }

    /// Depthwise causal convolution of `x [n,c]` with taps `w [c,K]`; the
    /// sequence is left-padded with `K-1` zeros and there is no bias.
    pub fn causal_conv(&mut self, x: Var, w: Var) -> Result<Var> {
        let (n, c) = self.dims2(x, "causal_conv")?;
        let (wc, k) = self.dims2(w, "causal_conv")?;
        if wc != c || k == 0 {
            return shape_err("causal_conv", self.shape(x), self.shape(w));
        }
        let mut out = vec![T::zero(); n * c];
        {
            let xv = self.value(x);
            let wv = self.value(w).data();
            let mut window: Vec<Option<&[T]>> = vec![None; k];
            for t in 0..n {
                for (j, slot) in window.iter_mut().enumerate() {
                    let s = t as isize - (k - 1) as isize + j as isize;
                    *slot = (s >= 0).then(|| xv.row(s as usize));
                }
                kernels::causal_conv_row(wv, k, &window, &mut out[t * c..(t + 1) * c]);
            }
        }
        let t = Tensor::from_vec(vec![n, c], out)?;
        Ok(self.push(t, Op::CausalConv { x, w }, &[x, w]))
    }

    /// Rotary embedding of `x [n, heads*head_dim]`; row `i` uses the angles
    /// of position `start + i`.
    pub fn rope(&mut self, x: Var, angles: &Arc<RopeAngles<T>>, head_dim: usize, start: usize) -> Result<Var> {
        let (n, c) = self.dims2(x, "rope")?;
        if head_dim == 0 || c % head_dim != 0 || angles.pairs * 2 != head_dim {
            return shape_err("rope", self.shape(x), &[angles.pairs * 2]);
        }
        if start + n > angles.positions() {
            return Err(Error::OutOfRange {
                what: "rope position",
                value: start + n,
                limit: angles.positions(),
            });
        }
        let mut t = self.value(x).clone();
        for i in 0..n {
            angles.apply(t.row_mut(i), head_dim, start + i, false);
        }
        Ok(self.push(
            t,
            Op::Rope {
                x,
                angles: Arc::clone(angles),
                head_dim,
                start,
            },
            &[x],
        ))
    }

    /// Causal multi-head attention over `q, k, v: [n, d]`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (n, d) = self.dims2(q, "causal_attention")?;
        for other in [k, v] {
            if self.shape(other) != [n, d] {
                return shape_err("causal_attention", self.shape(q), self.shape(other));
            }
        }
        if heads == 0 || d % heads != 0 {
            return shape_err("causal_attention", self.shape(q), &[heads]);
        }
        let mut probs = vec![T::zero(); heads * n * n];
        let mut out = vec![T::zero(); n * d];
        {
            let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
            let mut scratch = vec![T::zero(); heads * n];
            for i in 0..n {
                let m = i + 1;
                kernels::attention_row(
                    &qv[i * d..(i + 1) * d],
                    kv,
                    vv,
                    i,
                    heads,
                    &mut scratch[..heads * m],
                    &mut out[i * d..(i + 1) * d],
                );
                for h in 0..heads {
                    let dst = (h * n + i) * n;
                    probs[dst..dst + m].copy_from_slice(&scratch[h * m..(h + 1) * m]);
                }
            }
        }
        let t = Tensor::from_vec(vec![n, d], out)?;
        Ok(self.push(t, Op::Attention { q, k, v, heads, probs }, &[q, k, v]))
    }

    /// Mean cross-entropy of `logits [n,V]` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, vocab) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != n || n == 0 {
            return shape_err("cross_entropy", self.shape(logits), &[targets.len()]);
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0f64;
        for (i, &t) in targets.iter().enumerate() {
            if t >= vocab {
                return Err(Error::OutOfRange {
                    what: "target",
                    value: t,
                    limit: vocab,
                });
            }
            let row = &mut probs[i * vocab..(i + 1) * vocab];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
            loss += (lse - row[t]).as_f64();
            kernels::softmax_in_place(row);
        }
        let value = Tensor::scalar(T::from_f64(loss / n as f64));
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).numel() != 1 {
            return shape_err("backward", self.shape(output), &[1]);
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[output.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[output.0] = Some(Tensor::full(self.shape(output), T::one()));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backward_op(&node.op, &node.value, g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backward_op(&self, op: &Op<T>, out: &Tensor<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.requires_grad(*a) {
                    let da = kernels::matmul_a_bt(g.data(), self.value(*b).data(), m, n, k);
                    self.acc(grads, *a, Tensor::from_vec(vec![m, k], da).expect("shape"));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::matmul_at_b_acc(self.value(*a).data(), g.data(), m, k, n, &mut db);
                    self.acc(grads, *b, Tensor::from_vec(vec![k, n], db).expect("shape"));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *b, g.clone());
                self.acc(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.acc(grads, *a, zip(&g, bv, |x, y| x * y));
                }
                if self.requires_grad(*b) {
                    self.acc(grads, *b, zip(&g, av, |x, y| x * y));
                }
            }
            Op::Scale(a, s) => {
                let mut g = g;
                g.scale(*s);
                self.acc(grads, *a, g);
            }
            Op::MulCol(x, gate) => {
                let xv = self.value(*x);
                let gv = self.value(*gate).data();
                let c = xv.cols();
                if self.requires_grad(*gate) {
                    let dg: Vec<T> = g
                        .data()
                        .chunks(c)
                        .zip(xv.data().chunks(c))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(&p, &q)| p * q).sum())
                        .collect();
                    self.acc(grads, *gate, Tensor::from_vec(vec![gv.len(), 1], dg).expect("shape"));
                }
                if self.requires_grad(*x) {
                    let mut dx = g;
                    for (i, row) in dx.data_mut().chunks_mut(c).enumerate() {
                        row.iter_mut().for_each(|v| *v *= gv[i]);
                    }
                    self.acc(grads, *x, dx);
                }
            }
            Op::MulRow(x, s) => {
                let xv = self.value(*x);
                let sv = self.value(*s).data();
                let c = sv.len();
                if self.requires_grad(*s) {
                    let mut ds = vec![T::zero(); c];
                    for (gr, xr) in g.data().chunks(c).zip(xv.data().chunks(c)) {
                        for ((d, &p), &q) in ds.iter_mut().zip(gr).zip(xr) {
                            *d += p * q;
                        }
                    }
                    self.acc(grads, *s, Tensor::from_vec(vec![c], ds).expect("shape"));
                }
                if self.requires_grad(*x) {
                    let mut dx = g;
                    for row in dx.data_mut().chunks_mut(c) {
                        row.iter_mut().zip(sv).for_each(|(v, &w)| *v *= w);
                    }
                    self.acc(grads, *x, dx);
                }
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let c = av.cols();
                let scale_rows = |src: &Tensor<T>| {
                    let mut t = src.clone();
                    for (i, row) in t.data_mut().chunks_mut(c).enumerate() {
                        let gi = g.data()[i];
                        row.iter_mut().for_each(|v| *v *= gi);
                    }
                    t
                };
                if self.requires_grad(*a) {
                    self.acc(grads, *a, scale_rows(bv));
                }
                if self.requires_grad(*b) {
                    self.acc(grads, *b, scale_rows(av));
                }
            }
            Op::ConcatCols(parts) => {
                let n = g.rows();
                let total = g.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.requires_grad(p) {
                        let mut d = Vec::with_capacity(n * w);
                        for i in 0..n {
                            d.extend_from_slice(&g.data()[i * total + off..i * total + off + w]);
                        }
                        self.acc(grads, p, Tensor::from_vec(vec![n, w], d).expect("shape"));
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut off = 0;
                for &p in parts {
                    let r = self.shape(p)[0];
                    if self.requires_grad(p) {
                        let d = g.data()[off * c..(off + r) * c].to_vec();
                        self.acc(grads, p, Tensor::from_vec(vec![r, c], d).expect("shape"));
                    }
                    off += r;
                }
            }
            Op::SliceRows(x, start) => {
                let mut d = Tensor::zeros(self.shape(*x));
                let c = d.cols();
                d.data_mut()[start * c..start * c + g.numel()].copy_from_slice(g.data());
                self.acc(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                self.acc(grads, *x, zip(&g, out, |gy, y| gy * y * (T::one() - y)));
            }
            Op::Silu(x) => {
                self.acc(grads, *x, zip(&g, self.value(*x), |gy, xv| gy * kernels::silu_grad(xv)));
            }
            Op::Softmax(x) => {
                let c = out.shape().last().copied().unwrap_or(1);
                let mut d = g;
                for (dr, yr) in d.data_mut().chunks_mut(c).zip(out.data().chunks(c)) {
                    let dot: T = dr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for (dv, &y) in dr.iter_mut().zip(yr) {
                        *dv = y * (*dv - dot);
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::Sum(x) => {
                let g0 = g.data()[0];
                self.acc(grads, *x, Tensor::full(self.shape(*x), g0));
            }
            Op::RmsNorm { x, scale, group, inv } => {
                let xv = self.value(*x);
                let sv = self.value(*scale).data();
                let group = *group;
                let c = xv.cols();
                let groups = c / group;
                let mut dx = vec![T::zero(); xv.numel()];
                let mut ds = vec![T::zero(); group];
                let gn = T::from_f64(group as f64);
                for i in 0..xv.rows() {
                    for gi in 0..groups {
                        let r = inv[i * groups + gi];
                        let base = i * c + gi * group;
                        let xs = &xv.data()[base..base + group];
                        let gs = &g.data()[base..base + group];
                        let mut dot = T::zero();
                        for j in 0..group {
                            let xh = xs[j] * r;
                            ds[j] += gs[j] * xh;
                            dot += gs[j] * sv[j] * xh;
                        }
                        let mean = dot / gn;
                        for j in 0..group {
                            let xh = xs[j] * r;
                            dx[base + j] = (gs[j] * sv[j] - xh * mean) * r;
                        }
                    }
                }
                if self.requires_grad(*x) {
                    self.acc(grads, *x, Tensor::from_vec(xv.shape().to_vec(), dx).expect("shape"));
                }
                if self.requires_grad(*scale) {
                    self.acc(grads, *scale, Tensor::from_vec(vec![group], ds).expect("shape"));
                }
            }
            Op::Gather { table, rows } => {
                let mut d = Tensor::zeros(self.shape(*table));
                for (i, &r) in rows.iter().enumerate() {
                    for (dv, &gv) in d.row_mut(r).iter_mut().zip(g.row(i)) {
                        *dv += gv;
                    }
                }
                self.acc(grads, *table, d);
            }
            Op::CausalConv { x, w } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, c) = (xv.rows(), xv.cols());
                let k = wv.cols();
                let mut dx = vec![T::zero(); n * c];
                let mut dw = vec![T::zero(); c * k];
                for t in 0..n {
                    for j in 0..k {
                        let s = t as isize - (k - 1) as isize + j as isize;
                        if s < 0 {
                            continue;
                        }
                        let s = s as usize;
                        for ch in 0..c {
                            let gy = g.data()[t * c + ch];
                            dx[s * c + ch] += wv.data()[ch * k + j] * gy;
                            dw[ch * k + j] += xv.data()[s * c + ch] * gy;
                        }
                    }
                }
                if self.requires_grad(*x) {
                    self.acc(grads, *x, Tensor::from_vec(vec![n, c], dx).expect("shape"));
                }
                if self.requires_grad(*w) {
                    self.acc(grads, *w, Tensor::from_vec(vec![c, k], dw).expect("shape"));
                }
            }
            Op::Rope {
                x,
                angles,
                head_dim,
                start,
            } => {
                let mut d = g;
                for i in 0..d.rows() {
                    angles.apply(d.row_mut(i), *head_dim, start + i, true);
                }
                self.acc(grads, *x, d);
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, d) = (qv.rows(), qv.cols());
                let heads = *heads;
                let hd = d / heads;
                let scale = T::one() / T::from_f64(hd as f64).sqrt();
                let mut dq = vec![T::zero(); n * d];
                let mut dk = vec![T::zero(); n * d];
                let mut dv = vec![T::zero(); n * d];
                let mut dp = vec![T::zero(); n];
                for h in 0..heads {
                    let off = h * hd;
                    for i in 0..n {
                        let p = &probs[(h * n + i) * n..(h * n + i) * n + i + 1];
                        let go = &g.data()[i * d + off..i * d + off + hd];
                        let mut s = T::zero();
                        for j in 0..=i {
                            let vj = &vv.data()[j * d + off..j * d + off + hd];
                            dp[j] = go.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                            s += p[j] * dp[j];
                            for (dvv, &gv) in dv[j * d + off..j * d + off + hd].iter_mut().zip(go) {
                                *dvv += p[j] * gv;
                            }
                        }
                        let qi = &qv.data()[i * d + off..i * d + off + hd];
                        for j in 0..=i {
                            let ds = p[j] * (dp[j] - s) * scale;
                            if ds == T::zero() {
                                continue;
                            }
                            let kj = &kv.data()[j * d + off..j * d + off + hd];
                            for c in 0..hd {
                                dq[i * d + off + c] += ds * kj[c];
                                dk[j * d + off + c] += ds * qi[c];
                            }
                        }
                    }
                }
                self.acc(grads, *q, Tensor::from_vec(vec![n, d], dq).expect("shape"));
                self.acc(grads, *k, Tensor::from_vec(vec![n, d], dk).expect("shape"));
                self.acc(grads, *v, Tensor::from_vec(vec![n, d], dv).expect("shape"));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let n = targets.len();
                let vocab = probs.len() / n;
                let s = g.data()[0] / T::from_f64(n as f64);
                let mut d = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    d[i * vocab + t] -= T::one();
                }
                d.iter_mut().for_each(|v| *v *= s);
                self.acc(grads, *logits, Tensor::from_vec(vec![n, vocab], d).expect("shape"));
            }
        }
    }
}

fn zip<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape().to_vec(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(tape.value(y).data()[0], 9.0);
        assert_eq!(g.get(x).unwrap().data()[0], 6.0);
    }

    #[test]
    fn shape_errors_report_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {:?}", other.map(|v| v.index())),
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, -5.0, 0.0, 40.0]).unwrap());
        let y = tape.softmax(x);
        for row in tape.value(y).data().chunks(3) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[4, 7]));
        let l = tape.cross_entropy(x, &[0, 3, 6, 2]).unwrap();
        assert!((tape.value(l).data()[0] - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn conv_of_zero_sequence_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[5, 3]));
        let w = tape.constant(Tensor::from_vec(vec![3, 4], (0..12).map(f64::from).collect()).unwrap());
        let y = tape.causal_conv(x, w).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_is_causal() {
        let mut tape = Tape::<f64>::new();
        let mut data = vec![0.0; 6 * 2];
        data[3 * 2] = 1.0;
        let x = tape.constant(Tensor::from_vec(vec![6, 2], data).unwrap());
        let w = tape.constant(Tensor::full(&[2, 4], 1.0));
        let y = tape.causal_conv(x, w).unwrap();
        let col0: Vec<f64> = tape.value(y).data().chunks(2).map(|r| r[0]).collect();
        assert_eq!(col0, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn untouched_gather_rows_get_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let table = tape.leaf(Tensor::full(&[5, 2], 1.0), true);
        let rows = tape.gather(table, &[1, 3, 1]).unwrap();
        let s = tape.sum(rows);
        let g = tape.backward(s).unwrap();
        assert_eq!(
            g.get(table).unwrap().data(),
            &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]
        );
    }
}
