//! Define-by-run tape for reverse-mode differentiation over dense matrices.
//!
//! Nodes are appended in evaluation order, so the tape is already
//! topologically sorted; [`Graph::backward`] walks it once in reverse.

use std::sync::Arc;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which key positions each query position may attend to, per sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    len: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    /// Position `i` sees `j <= i`.
    pub fn causal(len: usize) -> Self {
        let mut allowed = vec![false; len * len];
        for i in 0..len {
            for j in 0..=i {
                allowed[i * len + j] = true;
            }
        }
        Self { len, allowed }
    }

    pub fn full(len: usize) -> Self {
        Self {
            len,
            allowed: vec![true; len * len],
        }
    }

    /// Position `i` sees itself and every ancestor in the DAG given by the
    /// adjacency matrix (`adj[i][j]` is an edge `i -> j`, row-major).
    pub fn from_dag(len: usize, adj: &[u8]) -> Result<Self> {
        if adj.len() != len * len {
            return Err(Error::Shape {
                op: "attention_mask",
                detail: format!("adjacency of {} entries for {len} nodes", adj.len()),
            });
        }
        let mut allowed = vec![false; len * len];
        for i in 0..len {
            allowed[i * len + i] = true;
        }
        // Transitive closure; entries are reachability `j -> i`.
        for _ in 0..len {
            let mut changed = false;
            for i in 0..len {
                for p in 0..len {
                    if adj[p * len + i] != 0 {
                        for j in 0..len {
                            if allowed[p * len + j] && !allowed[i * len + j] {
                                allowed[i * len + j] = true;
                                changed = true;
                            }
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        Ok(Self { len, allowed })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.len + key]
    }
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, S),
    RepeatRows(Var, usize),
    SegmentMean(Var, usize),
    Embedding(Var, Arc<[usize]>),
    RowSoftmax(Var),
    LayerNorm {
        x: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Square(Var),
    ClampMin(Var, S),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Arc<AttentionMask>,
        probs: Vec<S>,
    },
    Sum(Var),
    Mean(Var),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

/// Recorded computation; one per forward pass, confined to one thread.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a parameter or input tensor.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, name: &'static str, value: Tensor<S>, op: Op<S>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).add(self.value(b))?;
        self.push("add", out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).sub(self.value(b))?;
        self.push("sub", out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b))
    }

    fn row_broadcast(&self, op: &'static str, a: Var, row: Var) -> Result<(usize, usize)> {
        let (r, c) = self.dims(a);
        let (rr, rc) = self.dims(row);
        if rr != 1 || rc != c {
            return Err(shape_err(op, format!("{r}x{c} with row {rr}x{rc}")));
        }
        Ok((r, c))
    }

    /// `a + row` with `row` (1 x c) broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.row_broadcast("add_row", a, row)?;
        let (x, b) = (self.value(a).data(), self.value(row).data());
        let mut out = Vec::with_capacity(r * c);
        for xr in x.chunks_exact(c) {
            out.extend(xr.iter().zip(b).map(|(&u, &v)| u + v));
        }
        self.push("add_row", Tensor::from_parts(r, c, out), Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.row_broadcast("mul_row", a, row)?;
        let (x, b) = (self.value(a).data(), self.value(row).data());
        let mut out = Vec::with_capacity(r * c);
        for xr in x.chunks_exact(c) {
            out.extend(xr.iter().zip(b).map(|(&u, &v)| u * v));
        }
        self.push("mul_row", Tensor::from_parts(r, c, out), Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: S) -> Result<Var> {
        let out = self.value(a).scale(s);
        self.push("scale", out, Op::Scale(a, s))
    }

    /// Repeats each row `times` consecutive times: (b x c) -> (b*times x c).
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(r * times * c);
        for i in 0..r {
            for _ in 0..times {
                out.extend_from_slice(&x[i * c..(i + 1) * c]);
            }
        }
        self.push(
            "repeat_rows",
            Tensor::from_parts(r * times, c, out),
            Op::RepeatRows(a, times),
        )
    }

    /// Mean over consecutive groups of `seg` rows: (b*seg x c) -> (b x c).
    pub fn segment_mean(&mut self, a: Var, seg: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if seg == 0 || r % seg != 0 {
            return Err(shape_err("segment_mean", format!("{r} rows in segments of {seg}")));
        }
        let x = self.value(a).data();
        let inv = S::one() / S::lit(seg as f64);
        let b = r / seg;
        let mut out = vec![S::zero(); b * c];
        for i in 0..r {
            let dst = &mut out[(i / seg) * c..(i / seg + 1) * c];
            for (o, &v) in dst.iter_mut().zip(&x[i * c..(i + 1) * c]) {
                *o = *o + v;
            }
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
        self.push(
            "segment_mean",
            Tensor::from_parts(b, c, out),
            Op::SegmentMean(a, seg),
        )
    }

    /// Gathers rows of `table` by index.
    pub fn embedding(&mut self, table: Var, indices: Arc<[usize]>) -> Result<Var> {
        let (v, c) = self.dims(table);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(shape_err("embedding", format!("index {bad} >= table rows {v}")));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices.iter() {
            out.extend_from_slice(&t[i * c..(i + 1) * c]);
        }
        self.push(
            "embedding",
            Tensor::from_parts(indices.len(), c, out),
            Op::Embedding(table, indices),
        )
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let x = self.value(a).data();
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            softmax_into(&x[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
        }
        self.push("row_softmax", Tensor::from_parts(r, c, out), Op::RowSoftmax(a))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: S) -> Result<Var> {
        let (r, c) = self.dims(a);
        let x = self.value(a).data();
        let n = S::lit(c as f64);
        let mut xhat = vec![S::zero(); r * c];
        let mut inv_std = vec![S::zero(); r];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let is = S::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                xhat[i * c + j] = (row[j] - mean) * is;
            }
        }
        let out = Tensor::from_parts(r, c, xhat.clone());
        self.push("layer_norm", out, Op::LayerNorm { x: a, xhat, inv_std })
    }

    /// GELU with the tanh approximation (smooth everywhere).
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let (c, k) = (S::lit(GELU_C), S::lit(GELU_A));
        let half = S::lit(0.5);
        let out = self
            .value(a)
            .map(|x| half * x * (S::one() + fast_tanh(c * (x + k * x * x * x))));
        self.push("gelu", out, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.tanh());
        self.push("tanh", out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.ln());
        self.push("log", out, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.exp());
        self.push("exp", out, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * x);
        self.push("square", out, Op::Square(a))
    }

    /// `max(a, floor)`; gradient flows only where `a > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: S) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(floor));
        self.push("clamp_min", out, Op::ClampMin(a, floor))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::Empty("mean of empty tensor"));
        }
        let out = Tensor::scalar(t.sum() / S::lit(t.len() as f64));
        self.push("mean", out, Op::Mean(a))
    }

    /// Multi-head scaled dot-product attention over consecutive sequences of
    /// `mask.len()` rows. Disallowed logits receive an additive
    /// [`Scalar::MASK_FILL`] before the row softmax.
    pub fn masked_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Arc<AttentionMask>,
    ) -> Result<Var> {
        let (r, d) = self.dims(q);
        let seg = mask.len();
        if self.dims(k) != (r, d) || self.dims(v) != (r, d) {
            return Err(shape_err("attention", "q, k, v shapes differ".into()));
        }
        if heads == 0 || d % heads != 0 || seg == 0 || r % seg != 0 {
            return Err(shape_err(
                "attention",
                format!("{r}x{d} with {heads} heads and sequence length {seg}"),
            ));
        }
        let dh = d / heads;
        let scale = S::one() / S::lit(dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let nseq = r / seg;
        let mut probs = vec![S::zero(); nseq * heads * seg * seg];
        let mut out = vec![S::zero(); r * d];
        let mut logits = vec![S::zero(); seg];
        for b in 0..nseq {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seg {
                    let qi = &qd[(b * seg + i) * d + off..][..dh];
                    for j in 0..seg {
                        let kj = &kd[(b * seg + j) * d + off..][..dh];
                        let dot: S = qi.iter().zip(kj).map(|(&x, &y)| x * y).sum();
                        logits[j] = dot * scale
                            + if mask.allows(i, j) {
                                S::zero()
                            } else {
                                S::MASK_FILL
                            };
                    }
                    let p = &mut probs[((b * heads + h) * seg + i) * seg..][..seg];
                    softmax_into(&logits, p);
                    let o = &mut out[(b * seg + i) * d + off..][..dh];
                    for j in 0..seg {
                        let pj = p[j];
                        if pj == S::zero() {
                            continue;
                        }
                        let vj = &vd[(b * seg + j) * d + off..][..dh];
                        for (ov, &x) in o.iter_mut().zip(vj) {
                            *ov = *ov + pj * x;
                        }
                    }
                }
            }
        }
        self.push(
            "attention",
            Tensor::from_parts(r, d, out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
            },
        )
    }

    /// Reverse pass from a scalar output. Each node is visited exactly once.
    pub fn backward(&self, output: Var) -> Result<Gradients<S>> {
        let out_val = self.value(output);
        if out_val.len() != 1 {
            return Err(Error::NonScalarOutput(out_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![S::one()]);
        for i in (0..=output.0).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else {
                continue;
            };
            self.backprop_node(i, g, lower);
        }
        Ok(Gradients {
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, n)| g.map(|g| n.value.with_data(g)))
                .collect(),
        })
    }

    fn backprop_node(&self, i: usize, g: &[S], lower: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(lower, *a, m * k, |da| {
                    S::gemm(
                        m,
                        n,
                        k,
                        S::one(),
                        g,
                        n as isize,
                        1,
                        bv,
                        1,
                        n as isize,
                        S::one(),
                        da,
                        k as isize,
                        1,
                    )
                });
                acc(lower, *b, k * n, |db| {
                    S::gemm(
                        k,
                        m,
                        n,
                        S::one(),
                        av,
                        1,
                        k as isize,
                        g,
                        n as isize,
                        1,
                        S::one(),
                        db,
                        n as isize,
                        1,
                    )
                });
            }
            Op::Add(a, b) => {
                acc(lower, *a, g.len(), |d| add_into(d, g));
                acc(lower, *b, g.len(), |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(lower, *a, g.len(), |d| add_into(d, g));
                acc(lower, *b, g.len(), |d| {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d - g)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(lower, *a, g.len(), |d| {
                    for j in 0..d.len() {
                        d[j] = d[j] + g[j] * bv[j];
                    }
                });
                acc(lower, *b, g.len(), |d| {
                    for j in 0..d.len() {
                        d[j] = d[j] + g[j] * av[j];
                    }
                });
            }
            Op::AddRow(a, row) => {
                let c = self.dims(*row).1;
                acc(lower, *a, g.len(), |d| add_into(d, g));
                acc(lower, *row, c, |d| {
                    for gr in g.chunks_exact(c) {
                        add_into(d, gr);
                    }
                });
            }
            Op::MulRow(a, row) => {
                let c = self.dims(*row).1;
                let (av, rv) = (self.value(*a).data(), self.value(*row).data());
                acc(lower, *a, g.len(), |d| {
                    for (dr, gr) in d.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                        for ((dv, &gv), &r) in dr.iter_mut().zip(gr).zip(rv) {
                            *dv = *dv + gv * r;
                        }
                    }
                });
                acc(lower, *row, c, |d| {
                    for (gr, ar) in g.chunks_exact(c).zip(av.chunks_exact(c)) {
                        for ((dv, &gv), &x) in d.iter_mut().zip(gr).zip(ar) {
                            *dv = *dv + gv * x;
                        }
                    }
                });
            }
            Op::Scale(a, s) => {
                acc(lower, *a, g.len(), |d| {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g * *s)
                });
            }
            Op::RepeatRows(a, times) => {
                let (r, c) = self.dims(*a);
                acc(lower, *a, r * c, |d| {
                    for (i, chunk) in g.chunks(c).enumerate() {
                        let dst = &mut d[(i / times) * c..(i / times + 1) * c];
                        add_into(dst, chunk);
                    }
                });
            }
            Op::SegmentMean(a, seg) => {
                let (r, c) = self.dims(*a);
                let inv = S::one() / S::lit(*seg as f64);
                acc(lower, *a, r * c, |d| {
                    for i in 0..r {
                        let src = &g[(i / seg) * c..(i / seg + 1) * c];
                        for (dv, &gv) in d[i * c..(i + 1) * c].iter_mut().zip(src) {
                            *dv = *dv + gv * inv;
                        }
                    }
                });
            }
            Op::Embedding(table, indices) => {
                let (v, c) = self.dims(*table);
                acc(lower, *table, v * c, |d| {
                    for (row, &ix) in indices.iter().enumerate() {
                        add_into(&mut d[ix * c..(ix + 1) * c], &g[row * c..(row + 1) * c]);
                    }
                });
            }
            Op::RowSoftmax(a) => {
                let c = node.value.cols();
                acc(lower, *a, g.len(), |d| {
                    for i in 0..g.len() / c {
                        let (gr, yr) = (&g[i * c..(i + 1) * c], &y[i * c..(i + 1) * c]);
                        let dot: S = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            d[i * c + j] = d[i * c + j] + yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let (r, c) = self.dims(*x);
                let n = S::lit(c as f64);
                acc(lower, *x, r * c, |d| {
                    for i in 0..r {
                        let gr = &g[i * c..(i + 1) * c];
                        let xr = &xhat[i * c..(i + 1) * c];
                        let mg = gr.iter().copied().sum::<S>() / n;
                        let mgx = gr.iter().zip(xr).map(|(&a, &b)| a * b).sum::<S>() / n;
                        for j in 0..c {
                            d[i * c + j] = d[i * c + j] + inv_std[i] * (gr[j] - mg - xr[j] * mgx);
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let xv = self.value(*a).data();
                let (c, k) = (S::lit(GELU_C), S::lit(GELU_A));
                let (half, three) = (S::lit(0.5), S::lit(3.0));
                acc(lower, *a, g.len(), |d| {
                    for j in 0..d.len() {
                        let x = xv[j];
                        let th = fast_tanh(c * (x + k * x * x * x));
                        let dy = half * (S::one() + th)
                            + half * x * (S::one() - th * th) * c * (S::one() + three * k * x * x);
                        d[j] = d[j] + g[j] * dy;
                    }
                });
            }
            Op::Tanh(a) => acc(lower, *a, g.len(), |d| {
                for j in 0..d.len() {
                    d[j] = d[j] + g[j] * (S::one() - y[j] * y[j]);
                }
            }),
            Op::Sigmoid(a) => acc(lower, *a, g.len(), |d| {
                for j in 0..d.len() {
                    d[j] = d[j] + g[j] * y[j] * (S::one() - y[j]);
                }
            }),
            Op::Log(a) => {
                let xv = self.value(*a).data();
                acc(lower, *a, g.len(), |d| {
                    for j in 0..d.len() {
                        d[j] = d[j] + g[j] / xv[j];
                    }
                });
            }
            Op::Exp(a) => acc(lower, *a, g.len(), |d| {
                for j in 0..d.len() {
                    d[j] = d[j] + g[j] * y[j];
                }
            }),
            Op::Square(a) => {
                let xv = self.value(*a).data();
                let two = S::lit(2.0);
                acc(lower, *a, g.len(), |d| {
                    for j in 0..d.len() {
                        d[j] = d[j] + two * g[j] * xv[j];
                    }
                });
            }
            Op::ClampMin(a, floor) => {
                let xv = self.value(*a).data();
                acc(lower, *a, g.len(), |d| {
                    for j in 0..d.len() {
                        if xv[j] > *floor {
                            d[j] = d[j] + g[j];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                acc(lower, *a, n, |d| d.iter_mut().for_each(|v| *v = *v + g[0]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let s = g[0] / S::lit(n as f64);
                acc(lower, *a, n, |d| d.iter_mut().for_each(|v| *v = *v + s));
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
            } => self.backprop_attention(g, lower, (*q, *k, *v), *heads, mask.len(), probs),
        }
    }

    fn backprop_attention(
        &self,
        g: &[S],
        lower: &mut [Option<Vec<S>>],
        (q, k, v): (Var, Var, Var),
        heads: usize,
        seg: usize,
        probs: &[S],
    ) {
        let (r, d) = self.dims(q);
        let dh = d / heads;
        let scale = S::one() / S::lit(dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut dq = vec![S::zero(); r * d];
        let mut dk = vec![S::zero(); r * d];
        let mut dv = vec![S::zero(); r * d];
        let mut dp = vec![S::zero(); seg];
        for b in 0..r / seg {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seg {
                    let p = &probs[((b * heads + h) * seg + i) * seg..][..seg];
                    let gi = &g[(b * seg + i) * d + off..][..dh];
                    for j in 0..seg {
                        let vj = &vd[(b * seg + j) * d + off..][..dh];
                        dp[j] = gi.iter().zip(vj).map(|(&x, &y)| x * y).sum();
                        if p[j] != S::zero() {
                            let dvj = &mut dv[(b * seg + j) * d + off..][..dh];
                            for (o, &x) in dvj.iter_mut().zip(gi) {
                                *o = *o + p[j] * x;
                            }
                        }
                    }
                    let dot: S = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                    for j in 0..seg {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        if ds == S::zero() {
                            continue;
                        }
                        let qi = (b * seg + i) * d + off;
                        let kj = (b * seg + j) * d + off;
                        for t in 0..dh {
                            dq[qi + t] = dq[qi + t] + ds * kd[kj + t];
                            dk[kj + t] = dk[kj + t] + ds * qd[qi + t];
                        }
                    }
                }
            }
        }
        acc(lower, q, r * d, |x| add_into(x, &dq));
        acc(lower, k, r * d, |x| add_into(x, &dk));
        acc(lower, v, r * d, |x| add_into(x, &dv));
    }
}

impl<S: Scalar> Tensor<S> {
    fn with_data(&self, data: Vec<S>) -> Tensor<S> {
        Tensor::new(self.shape().to_vec(), data).expect("gradient matches value shape")
    }
}

fn acc<S: Scalar>(lower: &mut [Option<Vec<S>>], v: Var, len: usize, f: impl FnOnce(&mut [S])) {
    let slot = lower[v.0].get_or_insert_with(|| vec![S::zero(); len]);
    f(slot);
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

fn softmax_into<S: Scalar>(x: &[S], out: &mut [S]) {
    let max = x.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
    let mut total = S::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total = total + *o;
    }
    out.iter_mut().for_each(|o| *o = *o / total);
}

/// `tanh` through one `exp`, accurate to a few ulps in absolute terms.
fn fast_tanh<S: Scalar>(u: S) -> S {
    let two = S::lit(2.0);
    S::one() - two / ((two * u).exp() + S::one())
}

pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// `None` when the output does not depend on `v`.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `v`, zeros when the output does not depend on it.
    pub fn wrt(&self, graph: &Graph<S>, v: Var) -> Tensor<S> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()))
    }
}
