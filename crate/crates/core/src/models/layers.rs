//! Transformer building blocks shared by every model.

use rand::Rng;

use crate::autodiff::{AutodiffError, Bound, Graph, ParamId, ParamSet, Tensor, Var};
use crate::corpus::PAD;

/// Additive attention bias for disallowed positions.
pub(crate) const MASKED: f64 = -1e9;

/// One forward pass: the graph plus the optional dropout source.
pub(crate) struct Ctx<'r, R: Rng> {
    pub g: Graph,
    dropout: f64,
    rng: Option<&'r mut R>,
}

pub(crate) type EvalCtx = Ctx<'static, rand_chacha::ChaCha8Rng>;

impl EvalCtx {
    pub fn eval() -> Self {
        Ctx { g: Graph::new(), dropout: 0.0, rng: None }
    }
}

impl<'r, R: Rng> Ctx<'r, R> {
    pub fn train(dropout: f64, rng: &'r mut R) -> Self {
        Ctx { g: Graph::new(), dropout, rng: Some(rng) }
    }

    pub fn into_graph(self) -> Graph {
        self.g
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let Some(rng) = self.rng.as_deref_mut() else { return Ok(x) };
        if self.dropout <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.dropout;
        let shape = self.g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let m = self.g.constant(Tensor::new(&shape, data)?)?;
        self.g.mul(x, m)
    }
}

/// Right-padded batch of id sequences.
#[derive(Debug, Clone)]
pub(crate) struct Padded {
    pub ids: Vec<usize>,
    pub b: usize,
    pub t: usize,
    pub lens: Vec<usize>,
}

impl Padded {
    pub fn new<S: AsRef<[usize]>>(seqs: &[S]) -> Self {
        let t = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(1).max(1);
        let mut ids = Vec::with_capacity(seqs.len() * t);
        let mut lens = Vec::with_capacity(seqs.len());
        for s in seqs {
            let s = s.as_ref();
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat(PAD).take(t - s.len()));
            lens.push(s.len());
        }
        Self { ids, b: seqs.len(), t, lens }
    }

    /// `[b, 1, 1, t]` bias hiding padded keys.
    pub fn key_mask(&self) -> Tensor {
        let data = self.ids.iter().map(|&i| if i == PAD { MASKED } else { 0.0 }).collect();
        Tensor::new(&[self.b, 1, 1, self.t], data).expect("shape")
    }

    /// `[b, 1, t, t]` bias hiding future and padded keys.
    pub fn causal_mask(&self) -> Tensor {
        let (b, t) = (self.b, self.t);
        let mut data = vec![0.0; b * t * t];
        for n in 0..b {
            for q in 0..t {
                for k in 0..t {
                    if k > q || self.ids[n * t + k] == PAD {
                        data[(n * t + q) * t + k] = MASKED;
                    }
                }
            }
        }
        Tensor::new(&[b, 1, t, t], data).expect("shape")
    }

    /// `[b, 1, t]` averaging weights over the unpadded prefix of each row.
    pub fn pool_weights(&self) -> Tensor {
        let mut data = vec![0.0; self.b * self.t];
        for (n, &len) in self.lens.iter().enumerate() {
            for j in 0..len {
                data[n * self.t + j] = 1.0 / len as f64;
            }
        }
        Tensor::new(&[self.b, 1, self.t], data).expect("shape")
    }
}

/// Mean over the unpadded positions of `h` (`[b, t, d]`), giving `[b, d]`.
pub(crate) fn mean_pool<R: Rng>(c: &mut Ctx<'_, R>, h: Var, batch: &Padded) -> Result<Var, AutodiffError> {
    let d = c.g.shape(h)[2];
    let w = c.g.constant(batch.pool_weights())?;
    let pooled = c.g.matmul(w, h)?;
    c.g.reshape(pooled, &[batch.b, d])
}

pub(crate) fn embedding_table(ps: &mut ParamSet, name: &str, rows: usize, d: usize, rng: &mut impl Rng) -> ParamId {
    ps.add(name, Tensor::normal(&[rows, d], 0.02, rng))
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, name: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (din + dout) as f64).sqrt();
        let w = ps.add(format!("{name}.w"), Tensor::uniform(&[din, dout], bound, rng));
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[dout]));
        Self { w, b }
    }

    pub fn zeros(ps: &mut ParamSet, name: &str, din: usize, dout: usize) -> Self {
        let w = ps.add(format!("{name}.w"), Tensor::zeros(&[din, dout]));
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[dout]));
        Self { w, b }
    }

    pub fn forward<R: Rng>(&self, c: &mut Ctx<'_, R>, p: &Bound, x: Var) -> Result<Var, AutodiffError> {
        self.forward_graph(&mut c.g, p, x)
    }

    pub fn forward_graph(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, AutodiffError> {
        let y = g.matmul(x, p[self.w])?;
        g.add(y, p[self.b])
    }

    /// Direct evaluation on one row without a graph.
    pub fn apply(&self, ps: &ParamSet, x: &[f64]) -> Vec<f64> {
        let w = ps.value(self.w);
        let dout = w.shape()[1];
        let mut y = ps.value(self.b).data().to_vec();
        for (i, xi) in x.iter().enumerate() {
            for (yj, wij) in y.iter_mut().zip(&w.data()[i * dout..(i + 1) * dout]) {
                *yj += xi * wij;
            }
        }
        y
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize) -> Self {
        let gamma = ps.add(format!("{name}.gamma"), Tensor::filled(&[d], 1.0));
        let beta = ps.add(format!("{name}.beta"), Tensor::zeros(&[d]));
        Self { gamma, beta }
    }

    pub fn forward<R: Rng>(&self, c: &mut Ctx<'_, R>, p: &Bound, x: Var) -> Result<Var, AutodiffError> {
        c.g.layer_norm(x, p[self.gamma], p[self.beta])
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            q: Linear::new(ps, &format!("{name}.q"), d, d, rng),
            k: Linear::new(ps, &format!("{name}.k"), d, d, rng),
            v: Linear::new(ps, &format!("{name}.v"), d, d, rng),
            o: Linear::new(ps, &format!("{name}.o"), d, d, rng),
            heads,
        }
    }

    /// Returns the projected output `[b, tq, d]` and the attention weights `[b, heads, tq, tk]`.
    pub fn forward<R: Rng>(
        &self,
        c: &mut Ctx<'_, R>,
        p: &Bound,
        xq: Var,
        xkv: Var,
        mask: Option<Var>,
    ) -> Result<(Var, Var), AutodiffError> {
        let (b, tq, d) = {
            let s = c.g.shape(xq);
            (s[0], s[1], s[2])
        };
        let tk = c.g.shape(xkv)[1];
        let (h, dh) = (self.heads, d / self.heads);
        let q = self.q.forward(c, p, xq)?;
        let q = c.g.reshape(q, &[b, tq, h, dh])?;
        let q = c.g.permute(q, &[0, 2, 1, 3])?;
        let k = self.k.forward(c, p, xkv)?;
        let k = c.g.reshape(k, &[b, tk, h, dh])?;
        let k = c.g.permute(k, &[0, 2, 3, 1])?;
        let v = self.v.forward(c, p, xkv)?;
        let v = c.g.reshape(v, &[b, tk, h, dh])?;
        let v = c.g.permute(v, &[0, 2, 1, 3])?;
        let s = c.g.matmul(q, k)?;
        let mut s = c.g.scale(s, 1.0 / (dh as f64).sqrt())?;
        if let Some(m) = mask {
            s = c.g.add(s, m)?;
        }
        let a = c.g.softmax(s)?;
        let ctx = c.g.matmul(a, v)?;
        let ctx = c.g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = c.g.reshape(ctx, &[b, tq, d])?;
        Ok((self.o.forward(c, p, ctx)?, a))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize, f: usize, rng: &mut impl Rng) -> Self {
        Self {
            up: Linear::new(ps, &format!("{name}.up"), d, f, rng),
            down: Linear::new(ps, &format!("{name}.down"), f, d, rng),
        }
    }

    pub fn forward<R: Rng>(&self, c: &mut Ctx<'_, R>, p: &Bound, x: Var) -> Result<Var, AutodiffError> {
        let h = self.up.forward(c, p, x)?;
        let h = c.g.gelu(h)?;
        self.down.forward(c, p, h)
    }
}

/// Pre-norm self-attention block.
#[derive(Debug, Clone)]
pub(crate) struct EncoderBlock {
    ln1: Norm,
    attn: Attention,
    ln2: Norm,
    ff: FeedForward,
}

impl EncoderBlock {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize, heads: usize, f: usize, rng: &mut impl Rng) -> Self {
        Self {
            ln1: Norm::new(ps, &format!("{name}.ln1"), d),
            attn: Attention::new(ps, &format!("{name}.attn"), d, heads, rng),
            ln2: Norm::new(ps, &format!("{name}.ln2"), d),
            ff: FeedForward::new(ps, &format!("{name}.ff"), d, f, rng),
        }
    }

    pub fn forward<R: Rng>(&self, c: &mut Ctx<'_, R>, p: &Bound, x: Var, mask: Var) -> Result<(Var, Var), AutodiffError> {
        let h = self.ln1.forward(c, p, x)?;
        let (a, weights) = self.attn.forward(c, p, h, h, Some(mask))?;
        let a = c.dropout(a)?;
        let x = c.g.add(x, a)?;
        let h = self.ln2.forward(c, p, x)?;
        let f = self.ff.forward(c, p, h)?;
        let f = c.dropout(f)?;
        Ok((c.g.add(x, f)?, weights))
    }
}

/// Pre-norm causal self-attention, cross-attention and feed-forward.
#[derive(Debug, Clone)]
pub(crate) struct DecoderBlock {
    ln1: Norm,
    self_attn: Attention,
    ln2: Norm,
    cross: Attention,
    ln3: Norm,
    ff: FeedForward,
}

impl DecoderBlock {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize, heads: usize, f: usize, rng: &mut impl Rng) -> Self {
        Self {
            ln1: Norm::new(ps, &format!("{name}.ln1"), d),
            self_attn: Attention::new(ps, &format!("{name}.self"), d, heads, rng),
            ln2: Norm::new(ps, &format!("{name}.ln2"), d),
            cross: Attention::new(ps, &format!("{name}.cross"), d, heads, rng),
            ln3: Norm::new(ps, &format!("{name}.ln3"), d),
            ff: FeedForward::new(ps, &format!("{name}.ff"), d, f, rng),
        }
    }

    pub fn forward<R: Rng>(
        &self,
        c: &mut Ctx<'_, R>,
        p: &Bound,
        x: Var,
        self_mask: Var,
        memory: Var,
        memory_mask: Var,
    ) -> Result<Var, AutodiffError> {
        let h = self.ln1.forward(c, p, x)?;
        let (a, _) = self.self_attn.forward(c, p, h, h, Some(self_mask))?;
        let a = c.dropout(a)?;
        let x = c.g.add(x, a)?;
        let h = self.ln2.forward(c, p, x)?;
        let (a, _) = self.cross.forward(c, p, h, memory, Some(memory_mask))?;
        let a = c.dropout(a)?;
        let x = c.g.add(x, a)?;
        let h = self.ln3.forward(c, p, x)?;
        let f = self.ff.forward(c, p, h)?;
        let f = c.dropout(f)?;
        c.g.add(x, f)
    }
}

/// Token + learned position embeddings followed by encoder blocks and a final norm.
#[derive(Debug, Clone)]
pub(crate) struct Encoder {
    pub pos: ParamId,
    blocks: Vec<EncoderBlock>,
    ln_f: Norm,
}

impl Encoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        d: usize,
        layers: usize,
        heads: usize,
        f: usize,
        max_len: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let pos = embedding_table(ps, &format!("{name}.pos"), max_len, d, rng);
        let blocks = (0..layers).map(|l| EncoderBlock::new(ps, &format!("{name}.block{l}"), d, heads, f, rng)).collect();
        let ln_f = Norm::new(ps, &format!("{name}.ln_f"), d);
        Self { pos, blocks, ln_f }
    }

    /// Hidden states `[b, t, d]` and per-layer attention weights.
    pub fn forward<R: Rng>(
        &self,
        c: &mut Ctx<'_, R>,
        p: &Bound,
        embed: ParamId,
        batch: &Padded,
    ) -> Result<(Var, Vec<Var>), AutodiffError> {
        let x = embed_with_positions(c, p, embed, self.pos, batch)?;
        let mask = c.g.constant(batch.key_mask())?;
        let mut x = c.dropout(x)?;
        let mut weights = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, w) = block.forward(c, p, x, mask)?;
            x = y;
            weights.push(w);
        }
        Ok((self.ln_f.forward(c, p, x)?, weights))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Decoder {
    pos: ParamId,
    blocks: Vec<DecoderBlock>,
    ln_f: Norm,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        d: usize,
        layers: usize,
        heads: usize,
        f: usize,
        max_len: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let pos = embedding_table(ps, &format!("{name}.pos"), max_len, d, rng);
        let blocks = (0..layers).map(|l| DecoderBlock::new(ps, &format!("{name}.block{l}"), d, heads, f, rng)).collect();
        let ln_f = Norm::new(ps, &format!("{name}.ln_f"), d);
        Self { pos, blocks, ln_f }
    }

    /// Final (post-norm) hidden states `[b, t, d]`.
    pub fn forward<R: Rng>(
        &self,
        c: &mut Ctx<'_, R>,
        p: &Bound,
        embed: ParamId,
        batch: &Padded,
        memory: Var,
        memory_mask: Var,
    ) -> Result<Var, AutodiffError> {
        let x = embed_with_positions(c, p, embed, self.pos, batch)?;
        let mask = c.g.constant(batch.causal_mask())?;
        let mut x = c.dropout(x)?;
        for block in &self.blocks {
            x = block.forward(c, p, x, mask, memory, memory_mask)?;
        }
        self.ln_f.forward(c, p, x)
    }
}

fn embed_with_positions<R: Rng>(
    c: &mut Ctx<'_, R>,
    p: &Bound,
    embed: ParamId,
    pos: ParamId,
    batch: &Padded,
) -> Result<Var, AutodiffError> {
    let x = c.g.embedding(p[embed], &batch.ids, &[batch.b, batch.t])?;
    let pe = c.g.slice(p[pos], 0, 0, batch.t)?;
    c.g.add(x, pe)
}

pub(crate) fn encoder_block_params(d: usize, f: usize) -> usize {
    2 * d + 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d)
}

pub(crate) fn decoder_block_params(d: usize, f: usize) -> usize {
    3 * 2 * d + 8 * (d * d + d) + (d * f + f) + (f * d + d)
}
