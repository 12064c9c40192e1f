//! Layers shared by the score network and the predictors.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::{AttentionMask, Bound, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::glorot(fan_in, fan_out, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[1, fan_out])));
        Self { weight, bias }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.weight])?;
        match self.bias {
            Some(b) => g.add_row(y, p[b]),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: ParamId,
    shift: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[1, dim], S::one())),
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[1, dim])),
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, S::lit(LN_EPS))?;
        let n = g.mul_row(n, p[self.gain])?;
        g.add_row(n, p[self.shift])
    }
}

/// Pre-norm transformer block with masked multi-head self-attention.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    heads: usize,
    ln_attn: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    ln_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

impl TransformerBlock {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        ff_mult: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            heads,
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), dim),
            query: Linear::new(store, &format!("{name}.query"), dim, dim, true, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, true, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, true, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, true, rng),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), dim),
            ff_in: Linear::new(store, &format!("{name}.ff_in"), dim, dim * ff_mult, true, rng),
            ff_out: Linear::new(store, &format!("{name}.ff_out"), dim * ff_mult, dim, true, rng),
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        x: Var,
        mask: &Arc<AttentionMask>,
    ) -> Result<Var> {
        let h = self.ln_attn.forward(g, p, x)?;
        let q = self.query.forward(g, p, h)?;
        let k = self.key.forward(g, p, h)?;
        let v = self.value.forward(g, p, h)?;
        let a = g.masked_attention(q, k, v, self.heads, Arc::clone(mask))?;
        let a = self.out.forward(g, p, a)?;
        let x = g.add(x, a)?;
        let h = self.ln_ff.forward(g, p, x)?;
        let h = self.ff_in.forward(g, p, h)?;
        let h = g.gelu(h)?;
        let h = self.ff_out.forward(g, p, h)?;
        g.add(x, h)
    }
}

/// Stack of transformer blocks followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct Trunk {
    blocks: Vec<TransformerBlock>,
    ln_out: LayerNorm,
}

impl Trunk {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        depth: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            blocks: (0..depth)
                .map(|i| TransformerBlock::new(store, &format!("{name}.block{i}"), dim, heads, 2, rng))
                .collect(),
            ln_out: LayerNorm::new(store, &format!("{name}.ln_out"), dim),
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        mut x: Var,
        mask: &Arc<AttentionMask>,
    ) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(g, p, x, mask)?;
        }
        self.ln_out.forward(g, p, x)
    }
}

/// Sinusoidal features of a scalar time, `[sin(t w_i), cos(t w_i)]` with
/// geometrically spaced frequencies.
pub fn sinusoidal_features(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    // Times live in [0, 1]; scale so the slowest frequency still resolves them.
    let scaled = t * 1000.0;
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        out.push((scaled * freq).sin());
    }
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        out.push((scaled * freq).cos());
    }
    out.resize(dim, 0.0);
    out
}

/// `token_i = row_i(x) · Emb_ops + Emb_pos[i] (+ time map of t)`, one token
/// per ops-matrix row, for a batch of stacked `rows x cols` matrices.
#[derive(Clone, Debug)]
pub struct TokenEmbedding {
    rows: usize,
    ops: ParamId,
    pos: ParamId,
    time: Option<(Linear, usize)>,
}

impl TokenEmbedding {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        rows: usize,
        cols: usize,
        dim: usize,
        time_dim: Option<usize>,
        rng: &mut R,
    ) -> Self {
        Self {
            rows,
            ops: store.add(format!("{name}.ops"), Tensor::glorot(cols, dim, rng)),
            pos: store.add(format!("{name}.pos"), Tensor::randn(rows, dim, 0.1, rng)),
            time: time_dim.map(|td| (Linear::new(store, &format!("{name}.time"), td, dim, true, rng), td)),
        }
    }

    pub fn ops_table(&self) -> ParamId {
        self.ops
    }

    pub fn pos_table(&self) -> ParamId {
        self.pos
    }

    /// Embeds `x` of shape `(batch * rows) x cols`. `ts` holds one time per
    /// batch element and is required exactly when the embedding is timed.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var, ts: Option<&[f64]>) -> Result<Var> {
        let n = g.value(x).rows();
        if !n.is_multiple_of(self.rows) {
            return Err(Error::Shape {
                op: "token_embedding",
                detail: format!("{n} rows is not a multiple of {}", self.rows),
            });
        }
        let batch = n / self.rows;
        let ops = g.matmul(x, p[self.ops])?;
        let idx: Arc<[usize]> = (0..batch).flat_map(|_| 0..self.rows).collect();
        let pos = g.embedding(p[self.pos], idx)?;
        let tokens = g.add(ops, pos)?;
        match (&self.time, ts) {
            (None, None) => Ok(tokens),
            (Some((lin, td)), Some(ts)) if ts.len() == batch => {
                let feats: Vec<S> = ts.iter().flat_map(|&t| sinusoidal_features(t, *td)).map(S::lit).collect();
                let tf = g.leaf(Tensor::matrix(batch, *td, feats)?);
                let te = lin.forward(g, p, tf)?;
                let te = g.repeat_rows(te, self.rows)?;
                g.add(tokens, te)
            }
            (Some(_), Some(ts)) => Err(Error::Shape {
                op: "token_embedding",
                detail: format!("{} times for a batch of {batch}", ts.len()),
            }),
            (Some(_), None) => Err(Error::InvalidArgument("timed embedding needs t".into())),
            (None, Some(_)) => Err(Error::InvalidArgument("untimed embedding given t".into())),
        }
    }
}
