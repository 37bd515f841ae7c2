use std::collections::HashMap;

use super::{gemm, sigmoid_scalar, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// One attention block inside a packed attention op: query rows
/// `[q_start, q_start + q_len)` attend over key rows `[k_start, k_start + k_len)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

impl AttnSegment {
    /// Self-attention within one packed sequence.
    pub fn within(start: usize, len: usize) -> Self {
        Self {
            q_start: start,
            q_len: len,
            k_start: start,
            k_len: len,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    ScatterRows {
        base: Var,
        rows: Var,
        index: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    PoolRows(Var, Vec<(usize, usize)>),
    Sum(Var),
    Mean(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<AttnSegment>,
        heads: usize,
        probs: Vec<Vec<f64>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Operation record in topological order. Inputs always precede consumers
/// because a node can only reference [`Var`]s that already exist.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradient map produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn is_reachable(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }

    /// Gradients of every parameter bound into the graph, ordered by id.
    pub fn params(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<_> = self.params.iter().map(|&(p, v)| (p, self.get(v))).collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Adds an input or constant leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Binds a stored parameter as a leaf; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        if tb.rows() != k {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        if tb.cols() != k {
            return Err(shape_err("matmul_t", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), true, &mut out, false);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulT(a, b)))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// Adds a length-`cols` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let c = ta.cols();
        if tb.len() != c {
            return Err(shape_err("add_row", ta, tb));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c) {
            for (x, &b) in row.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddRow(a, bias)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        self.push(t, Op::Scale(a, s))
    }

    /// `1 - a`, element-wise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| 1.0 - x);
        self.push(t, Op::OneMinus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid_scalar);
        self.push(t, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        self.push(t, Op::Tanh(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| gelu_parts(x).0);
        self.push(t, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        self.push(t, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::SoftmaxRows(a))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias` (both length `d`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if tg.len() != d || tb.len() != d {
            return Err(shape_err("layer_norm", tx, tg));
        }
        if eps <= 0.0 {
            return Err(Error::Domain("layer_norm eps must be positive".into()));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(d) {
            let (mean, inv) = row_stats(row, eps);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, eps }))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (b, c) = (tl.rows(), tl.cols());
        if labels.len() != b {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::Index {
                    what: "class label",
                    index: y,
                    len: c,
                });
            }
            total += neg_log_softmax(tl.row(i), y);
        }
        let t = Tensor::scalar(total / b as f64);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Mean elementwise binary cross-entropy on logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.len() != targets.len() {
            return Err(Error::Shape {
                op: "bce_with_logits",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let total: f64 = tl.data().iter().zip(targets).map(|(&z, &t)| softplus(z) - t * z).sum();
        let t = Tensor::scalar(total / targets.len() as f64);
        Ok(self.push(
            t,
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Row lookup: output row `i` is `a[index[i]]`.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        if index.is_empty() {
            return Err(Error::Contract("gather_rows with no rows".into()));
        }
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= r {
                return Err(Error::Index {
                    what: "gather row",
                    index: i,
                    len: r,
                });
            }
            data.extend_from_slice(ta.row(i));
        }
        let t = Tensor::matrix(index.len(), c, data)?;
        Ok(self.push(t, Op::GatherRows(a, index.to_vec())))
    }

    /// Copy of `base` with rows `index[i]` replaced by `rows[i]`. Rows not named
    /// in `index` are copied bit-for-bit.
    pub fn scatter_rows(&mut self, base: Var, rows: Var, index: &[usize]) -> Result<Var> {
        let (tb, tr) = (self.value(base), self.value(rows));
        let c = tb.cols();
        if tr.cols() != c || tr.rows() != index.len() {
            return Err(shape_err("scatter_rows", tb, tr));
        }
        let mut seen = vec![false; tb.rows()];
        let mut data = tb.data().to_vec();
        for (k, &i) in index.iter().enumerate() {
            if i >= tb.rows() {
                return Err(Error::Index {
                    what: "scatter row",
                    index: i,
                    len: tb.rows(),
                });
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Contract(format!("scatter row {i} repeated")));
            }
            data[i * c..(i + 1) * c].copy_from_slice(tr.row(k));
        }
        let t = Tensor::new(tb.shape().to_vec(), data)?;
        Ok(self.push(
            t,
            Op::ScatterRows {
                base,
                rows,
                index: index.to_vec(),
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let c = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(shape_err("concat_rows", self.value(*first), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let t = Tensor::matrix(rows, c, data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec())))
    }

    /// Output row `i` is the mean of rows `[start, start + len)` of `a` for the
    /// `i`-th `(start, len)` group.
    pub fn pool_rows(&mut self, a: Var, groups: &[(usize, usize)]) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.cols();
        let mut data = vec![0.0; groups.len() * c];
        for (g, &(s, l)) in groups.iter().enumerate() {
            if l == 0 || s + l > ta.rows() {
                return Err(Error::Contract(format!(
                    "pool group ({s}, {l}) outside {} rows",
                    ta.rows()
                )));
            }
            let out = &mut data[g * c..(g + 1) * c];
            for r in s..s + l {
                for (o, &v) in out.iter_mut().zip(ta.row(r)) {
                    *o += v;
                }
            }
            for o in out.iter_mut() {
                *o /= l as f64;
            }
        }
        let t = Tensor::matrix(groups.len(), c, data)?;
        Ok(self.push(t, Op::PoolRows(a, groups.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(t, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::scalar(ta.data().iter().sum::<f64>() / ta.len() as f64);
        self.push(t, Op::Mean(a))
    }

    /// Multi-head scaled dot-product attention over packed rows.
    ///
    /// `q` is `Nq×d`, `k` and `v` are `Nk×d`; each segment maps a block of query
    /// rows to the block of key rows it may see. Query rows outside every
    /// segment come out as zero.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, segments: &[AttnSegment], heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        if tk.cols() != d || tv.cols() != d || tk.rows() != tv.rows() {
            return Err(shape_err("attention", tq, tk));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Contract(format!(
                "model width {d} not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; tq.rows() * d];
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for s in segments {
            if s.q_start + s.q_len > tq.rows() || s.k_start + s.k_len > tk.rows() || s.k_len == 0 {
                return Err(Error::Contract(format!("attention segment {s:?} out of range")));
            }
            for h in 0..heads {
                let mut p = vec![0.0; s.q_len * s.k_len];
                for i in 0..s.q_len {
                    let qi = &tq.row(s.q_start + i)[h * dh..(h + 1) * dh];
                    let prow = &mut p[i * s.k_len..(i + 1) * s.k_len];
                    for (j, pj) in prow.iter_mut().enumerate() {
                        let kj = &tk.row(s.k_start + j)[h * dh..(h + 1) * dh];
                        *pj = dot(qi, kj) * scale;
                    }
                    softmax_in_place(prow);
                    let orow = &mut out[(s.q_start + i) * d + h * dh..(s.q_start + i) * d + (h + 1) * dh];
                    for (j, &pj) in prow.iter().enumerate() {
                        let vj = &tv.row(s.k_start + j)[h * dh..(h + 1) * dh];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o += pj * x;
                        }
                    }
                }
                probs.push(p);
            }
        }
        let t = Tensor::matrix(tq.rows(), d, out)?;
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
            },
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let tl = self.value(loss);
        if tl.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                tl.shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(tl.shape(), 1.0));
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.params.iter().map(|(&p, &v)| (p, v)).collect(),
        })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let ga = slot(grads, *a, ta);
                gemm(m, n, k, g.data(), false, tb.data(), true, ga, true);
                let gb = slot(grads, *b, tb);
                gemm(k, m, n, ta.data(), true, g.data(), false, gb, true);
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                let ga = slot(grads, *a, ta);
                gemm(m, n, k, g.data(), false, tb.data(), false, ga, true);
                let gb = slot(grads, *b, tb);
                gemm(n, m, k, g.data(), true, ta.data(), false, gb, true);
            }
            Op::Add(a, b) => {
                axpy(slot(grads, *a, g), g.data(), 1.0);
                axpy(slot(grads, *b, g), g.data(), 1.0);
            }
            Op::Sub(a, b) => {
                axpy(slot(grads, *a, g), g.data(), 1.0);
                axpy(slot(grads, *b, g), g.data(), -1.0);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = slot(grads, *a, ta);
                for ((o, &gi), &bv) in ga.iter_mut().zip(g.data()).zip(tb.data()) {
                    *o += gi * bv;
                }
                let gb = slot(grads, *b, tb);
                for ((o, &gi), &av) in gb.iter_mut().zip(g.data()).zip(ta.data()) {
                    *o += gi * av;
                }
            }
            Op::AddRow(a, bias) => {
                axpy(slot(grads, *a, g), g.data(), 1.0);
                let tb = self.value(*bias);
                let c = tb.len();
                let gb = slot(grads, *bias, tb);
                for row in g.data().chunks(c) {
                    for (o, &x) in gb.iter_mut().zip(row) {
                        *o += x;
                    }
                }
            }
            Op::Scale(a, s) => axpy(slot(grads, *a, g), g.data(), *s),
            Op::OneMinus(a) => axpy(slot(grads, *a, g), g.data(), -1.0),
            Op::Sigmoid(a) => {
                let ga = slot(grads, *a, g);
                for ((o, &gi), &yi) in ga.iter_mut().zip(g.data()).zip(y.data()) {
                    *o += gi * yi * (1.0 - yi);
                }
            }
            Op::Tanh(a) => {
                let ga = slot(grads, *a, g);
                for ((o, &gi), &yi) in ga.iter_mut().zip(g.data()).zip(y.data()) {
                    *o += gi * (1.0 - yi * yi);
                }
            }
            Op::Gelu(a) => {
                let ta = self.value(*a);
                let ga = slot(grads, *a, ta);
                for ((o, &gi), &x) in ga.iter_mut().zip(g.data()).zip(ta.data()) {
                    *o += gi * gelu_parts(x).1;
                }
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                let ga = slot(grads, *a, ta);
                for ((o, &gi), &x) in ga.iter_mut().zip(g.data()).zip(ta.data()) {
                    if x > 0.0 {
                        *o += gi;
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let c = y.cols();
                let ga = slot(grads, *a, y);
                for ((orow, grow), yrow) in ga.chunks_mut(c).zip(g.data().chunks(c)).zip(y.data().chunks(c)) {
                    let s = dot(grow, yrow);
                    for ((o, &gi), &yi) in orow.iter_mut().zip(grow).zip(yrow) {
                        *o += yi * (gi - s);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (tx, tg) = (self.value(*x), self.value(*gain));
                let d = tx.cols();
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let mut dx = vec![0.0; tx.len()];
                let mut dxhat = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                for ((xrow, grow), dxrow) in tx.data().chunks(d).zip(g.data().chunks(d)).zip(dx.chunks_mut(d)) {
                    let (mean, inv) = row_stats(xrow, *eps);
                    for j in 0..d {
                        xhat[j] = (xrow[j] - mean) * inv;
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                        dxhat[j] = grow[j] * tg.data()[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = dot(&dxhat, &xhat) / d as f64;
                    for j in 0..d {
                        dxrow[j] = inv * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                axpy(slot(grads, *x, tx), &dx, 1.0);
                axpy(slot(grads, *gain, tg), &dgain, 1.0);
                let tb = self.value(*bias);
                axpy(slot(grads, *bias, tb), &dbias, 1.0);
            }
            Op::CrossEntropy { logits, labels } => {
                let tl = self.value(*logits);
                let c = tl.cols();
                let scale = g.item() / labels.len() as f64;
                let gl = slot(grads, *logits, tl);
                for (i, &lab) in labels.iter().enumerate() {
                    let mut p = tl.row(i).to_vec();
                    softmax_in_place(&mut p);
                    p[lab] -= 1.0;
                    for (o, pj) in gl[i * c..(i + 1) * c].iter_mut().zip(p) {
                        *o += scale * pj;
                    }
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let tl = self.value(*logits);
                let scale = g.item() / targets.len() as f64;
                let gl = slot(grads, *logits, tl);
                for ((o, &z), &t) in gl.iter_mut().zip(tl.data()).zip(targets) {
                    *o += scale * (sigmoid_scalar(z) - t);
                }
            }
            Op::GatherRows(a, index) => {
                let ta = self.value(*a);
                let c = ta.cols();
                let ga = slot(grads, *a, ta);
                for (k, &r) in index.iter().enumerate() {
                    for (o, &x) in ga[r * c..(r + 1) * c].iter_mut().zip(g.row(k)) {
                        *o += x;
                    }
                }
            }
            Op::ScatterRows { base, rows, index } => {
                let c = g.cols();
                let mut gb = g.data().to_vec();
                for &r in index {
                    gb[r * c..(r + 1) * c].iter_mut().for_each(|v| *v = 0.0);
                }
                axpy(slot(grads, *base, g), &gb, 1.0);
                let tr = self.value(*rows);
                let gr = slot(grads, *rows, tr);
                for (k, &r) in index.iter().enumerate() {
                    for (o, &x) in gr[k * c..(k + 1) * c].iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let tp = self.value(*p);
                    let n = tp.len();
                    axpy(slot(grads, *p, tp), &g.data()[off..off + n], 1.0);
                    off += n;
                }
            }
            Op::PoolRows(a, groups) => {
                let ta = self.value(*a);
                let c = ta.cols();
                let ga = slot(grads, *a, ta);
                for (k, &(s, l)) in groups.iter().enumerate() {
                    let w = 1.0 / l as f64;
                    for r in s..s + l {
                        for (o, &x) in ga[r * c..(r + 1) * c].iter_mut().zip(g.row(k)) {
                            *o += w * x;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let ta = self.value(*a);
                let gv = g.item();
                slot(grads, *a, ta).iter_mut().for_each(|o| *o += gv);
            }
            Op::Mean(a) => {
                let ta = self.value(*a);
                let gv = g.item() / ta.len() as f64;
                slot(grads, *a, ta).iter_mut().for_each(|o| *o += gv);
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => self.backprop_attention(*q, *k, *v, segments, *heads, probs, g, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[AttnSegment],
        heads: usize,
        probs: &[Vec<f64>],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; tq.len()];
        let mut dk = vec![0.0; tk.len()];
        let mut dv = vec![0.0; tv.len()];
        for (si, s) in segments.iter().enumerate() {
            for h in 0..heads {
                let p = &probs[si * heads + h];
                let cols = h * dh..(h + 1) * dh;
                for i in 0..s.q_len {
                    let qi_row = s.q_start + i;
                    let go = &g.row(qi_row)[cols.clone()];
                    let prow = &p[i * s.k_len..(i + 1) * s.k_len];
                    // dP_ij = dO_i · V_j ; dS = P ⊙ (dP - Σ_j P_ij dP_ij)
                    let dp: Vec<f64> = (0..s.k_len)
                        .map(|j| dot(go, &tv.row(s.k_start + j)[cols.clone()]))
                        .collect();
                    let mix = dot(&dp, prow);
                    for j in 0..s.k_len {
                        let kj_row = s.k_start + j;
                        let pij = prow[j];
                        let ds = pij * (dp[j] - mix) * scale;
                        for (c, col) in cols.clone().enumerate() {
                            dv[kj_row * d + col] += pij * go[c];
                            dq[qi_row * d + col] += ds * tk.data()[kj_row * d + col];
                            dk[kj_row * d + col] += ds * tq.data()[qi_row * d + col];
                        }
                    }
                }
            }
        }
        axpy(slot(grads, q, tq), &dq, 1.0);
        axpy(slot(grads, k, tk), &dk, 1.0);
        axpy(slot(grads, v, tv), &dv, 1.0);
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, like: &Tensor) -> &'a mut [f64] {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(like.shape())).data_mut()
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// `-log softmax(row)[y]`, accurate when the target dominates.
fn neg_log_softmax(row: &[f64], y: usize) -> f64 {
    let (arg, m) = row.iter().copied().enumerate().fold(
        (0, f64::NEG_INFINITY),
        |(ai, am), (i, v)| if v > am { (i, v) } else { (ai, am) },
    );
    let rest: f64 = row
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, v)| (v - m).exp())
        .sum();
    (m - row[y]) + rest.ln_1p()
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}
