use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{dist, AutodiffError, Bound, Graph, ParamId, ParamSet, Tensor, Var};
use crate::corpus::{Vocabulary, BOS, EOS};

use super::checkpoint::Checkpoint;
use super::config::{Fields, Seq2SeqConfig};
use super::layers::{embedding_table, mean_pool, Ctx, Decoder, Encoder, EvalCtx, Linear, Padded};
use super::ModelError;

const INFERENCE_BATCH: usize = 128;

/// Tokens that decoding never emits: every reserved symbol except EOS.
pub fn is_blocked(id: usize) -> bool {
    Vocabulary::is_special(id) && id != EOS
}

/// Softmax over next-token logits with blocked tokens removed and the rest renormalised.
pub fn next_token_distribution(logits: &[f64]) -> Vec<f64> {
    let mut p = dist::softmax(logits);
    let mut total = 0.0;
    for (i, v) in p.iter_mut().enumerate() {
        if is_blocked(i) {
            *v = 0.0;
        }
        total += *v;
    }
    p.iter_mut().for_each(|v| *v /= total);
    p
}

/// Encoder states for one source sentence, computed once per decode.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSource {
    pub ids: Vec<usize>,
    /// `[1, s, d]`.
    pub states: Tensor,
}

/// Encoder-decoder denoiser with a shared, output-tied embedding table.
#[derive(Debug, Clone)]
pub struct Seq2Seq {
    config: Seq2SeqConfig,
    params: ParamSet,
    embed: ParamId,
    out_bias: ParamId,
    encoder: Encoder,
    decoder: Decoder,
}

impl Seq2Seq {
    pub const KIND: &'static str = "seq2seq";

    pub fn new(config: Seq2SeqConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let mut params = ParamSet::new();
        let embed = embedding_table(&mut params, "embed", c.vocab_size, c.d_model, &mut rng);
        let out_bias = params.add("out_bias", Tensor::zeros(&[c.vocab_size]));
        let encoder =
            Encoder::new(&mut params, "encoder", c.d_model, c.encoder_layers, c.num_heads, c.ff_dim, c.max_len, &mut rng);
        let decoder =
            Decoder::new(&mut params, "decoder", c.d_model, c.decoder_layers, c.num_heads, c.ff_dim, c.max_len, &mut rng);
        Ok(Self { config, params, embed, out_bias, encoder, decoder })
    }

    pub fn config(&self) -> &Seq2SeqConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Encoder input: tokens truncated to fit, then EOS.
    pub fn source_ids(&self, tokens: &[usize]) -> Vec<usize> {
        let keep = tokens.len().min(self.config.max_len - 1);
        let mut ids = tokens[..keep].to_vec();
        ids.push(EOS);
        ids
    }

    /// Teacher-forcing pair: `BOS tokens` in, `tokens EOS` out.
    pub fn teacher_ids(&self, tokens: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let keep = tokens.len().min(self.config.max_len - 1);
        let mut input = vec![BOS];
        input.extend_from_slice(&tokens[..keep]);
        let mut output = tokens[..keep].to_vec();
        output.push(EOS);
        (input, output)
    }

    pub(crate) fn encode_batch<R: Rng>(&self, c: &mut Ctx<'_, R>, p: &Bound, src: &Padded) -> Result<(Var, Var), AutodiffError> {
        let (h, _) = self.encoder.forward(c, p, self.embed, src)?;
        let mask = c.g.constant(src.key_mask())?;
        Ok((h, mask))
    }

    pub(crate) fn decode_batch<R: Rng>(
        &self,
        c: &mut Ctx<'_, R>,
        p: &Bound,
        memory: Var,
        memory_mask: Var,
        dec: &Padded,
    ) -> Result<Var, AutodiffError> {
        self.decoder.forward(c, p, self.embed, dec, memory, memory_mask)
    }

    /// Output projection through the tied embedding.
    pub(crate) fn project<R: Rng>(&self, c: &mut Ctx<'_, R>, p: &Bound, hidden: Var) -> Result<Var, AutodiffError> {
        let et = c.g.transpose(p[self.embed])?;
        let logits = c.g.matmul(hidden, et)?;
        c.g.add(logits, p[self.out_bias])
    }

    /// Mean teacher-forced cross-entropy of `targets` given `sources` (raw token lists), skipping padding.
    pub(crate) fn reconstruction_loss<R: Rng>(
        &self,
        c: &mut Ctx<'_, R>,
        p: &Bound,
        sources: &[Vec<usize>],
        targets: &[Vec<usize>],
    ) -> Result<(Var, Var, Padded), AutodiffError> {
        let src = Padded::new(&sources.iter().map(|s| self.source_ids(s)).collect::<Vec<_>>());
        let (dec_in, dec_out): (Vec<_>, Vec<_>) = targets.iter().map(|t| self.teacher_ids(t)).unzip();
        let dec = Padded::new(&dec_in);
        let (memory, mask) = self.encode_batch(c, p, &src)?;
        let h = self.decode_batch(c, p, memory, mask, &dec)?;
        let logits = self.project(c, p, h)?;
        let mut labels = Vec::with_capacity(dec.b * dec.t);
        for out in &dec_out {
            labels.extend(out.iter().map(|&x| Some(x)));
            labels.extend(std::iter::repeat(None).take(dec.t - out.len()));
        }
        let loss = c.g.cross_entropy(logits, &labels)?;
        Ok((loss, memory, src))
    }

    pub fn encode(&self, tokens: &[usize]) -> Result<EncodedSource, ModelError> {
        let ids = self.source_ids(tokens);
        let batch = Padded::new(&[ids.as_slice()]);
        let mut c = EvalCtx::eval();
        let p = self.params.bind(&mut c.g, false)?;
        let (h, _) = self.encode_batch(&mut c, &p, &batch)?;
        Ok(EncodedSource { ids, states: c.g.value(h).clone() })
    }

    /// Final decoder hidden states `[t, d]` for a prefix that starts with BOS.
    pub fn decoder_states(&self, source: &EncodedSource, prefix: &[usize]) -> Result<Tensor, ModelError> {
        let mut c = EvalCtx::eval();
        let p = self.params.bind(&mut c.g, false)?;
        let memory = c.g.constant(source.states.clone())?;
        let mask = c.g.constant(Padded::new(&[source.ids.as_slice()]).key_mask())?;
        let dec = Padded::new(&[prefix]);
        let h = self.decode_batch(&mut c, &p, memory, mask, &dec)?;
        let d = self.config.d_model;
        Ok(c.g.value(h).clone().reshape(&[prefix.len(), d])?)
    }

    /// Next-token logits for one hidden row.
    pub fn output_logits(&self, hidden: &[f64]) -> Vec<f64> {
        let e = self.params.value(self.embed);
        let d = self.config.d_model;
        let mut out = self.params.value(self.out_bias).data().to_vec();
        for (v, o) in out.iter_mut().enumerate() {
            *o += e.data()[v * d..(v + 1) * d].iter().zip(hidden).map(|(a, b)| a * b).sum::<f64>();
        }
        out
    }

    /// Tied output embedding `[vocab, d]` and bias, for building perturbation graphs.
    pub fn output_layer(&self) -> (&Tensor, &Tensor) {
        (self.params.value(self.embed), self.params.value(self.out_bias))
    }

    /// Longest output a decode may produce.
    pub fn max_output_len(&self, requested: usize) -> usize {
        requested.min(self.config.max_len - 1)
    }

    /// Step-by-step decoding where `adjust` may reshape each next-token distribution before the argmax.
    pub fn decode_with(
        &self,
        tokens: &[usize],
        max_len: usize,
        mut adjust: impl FnMut(&mut [f64]),
    ) -> Result<Vec<usize>, ModelError> {
        let source = self.encode(tokens)?;
        let limit = self.max_output_len(max_len);
        let mut prefix = vec![BOS];
        while prefix.len() - 1 < limit {
            let h = self.decoder_states(&source, &prefix)?;
            let mut p = next_token_distribution(&self.output_logits(h.row(prefix.len() - 1)));
            adjust(&mut p);
            let next = dist::argmax(&p);
            if next == EOS {
                break;
            }
            prefix.push(next);
        }
        Ok(prefix[1..].to_vec())
    }

    /// Deterministic argmax decoding; stops at EOS or `max_len` tokens.
    pub fn greedy_decode(&self, tokens: &[usize], max_len: usize) -> Result<Vec<usize>, ModelError> {
        self.decode_with(tokens, max_len, |_| {})
    }

    /// Teacher-forced logits `[t, vocab]` for `target` given `source`.
    pub fn teacher_forced_logits(&self, source: &[usize], target: &[usize]) -> Result<Tensor, ModelError> {
        let mut c = EvalCtx::eval();
        let p = self.params.bind(&mut c.g, false)?;
        let src = Padded::new(&[self.source_ids(source)]);
        let dec = Padded::new(&[self.teacher_ids(target).0]);
        let (memory, mask) = self.encode_batch(&mut c, &p, &src)?;
        let h = self.decode_batch(&mut c, &p, memory, mask, &dec)?;
        let logits = self.project(&mut c, &p, h)?;
        Ok(c.g.value(logits).clone().reshape(&[dec.t, self.config.vocab_size])?)
    }

    /// Mean-pooled final decoder states of teacher-forced passes, one vector per (source, target) pair.
    pub fn decoder_pooled(&self, pairs: &[(Vec<usize>, Vec<usize>)]) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(INFERENCE_BATCH) {
            let mut c = EvalCtx::eval();
            let p = self.params.bind(&mut c.g, false)?;
            let src = Padded::new(&chunk.iter().map(|(s, _)| self.source_ids(s)).collect::<Vec<_>>());
            let dec = Padded::new(&chunk.iter().map(|(_, t)| self.teacher_ids(t).0).collect::<Vec<_>>());
            let (memory, mask) = self.encode_batch(&mut c, &p, &src)?;
            let h = self.decode_batch(&mut c, &p, memory, mask, &dec)?;
            let pooled = mean_pool(&mut c, h, &dec)?;
            let v = c.g.value(pooled);
            out.extend((0..chunk.len()).map(|n| v.row(n).to_vec()));
        }
        Ok(out)
    }

    /// Mean-pooled encoder states per source sentence.
    pub fn encoder_pooled(&self, sources: &[Vec<usize>]) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut out = Vec::with_capacity(sources.len());
        for chunk in sources.chunks(INFERENCE_BATCH) {
            let mut c = EvalCtx::eval();
            let p = self.params.bind(&mut c.g, false)?;
            let src = Padded::new(&chunk.iter().map(|s| self.source_ids(s)).collect::<Vec<_>>());
            let (h, _) = self.encode_batch(&mut c, &p, &src)?;
            let pooled = mean_pool(&mut c, h, &src)?;
            let v = c.g.value(pooled);
            out.extend((0..chunk.len()).map(|n| v.row(n).to_vec()));
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, vocab: &Vocabulary) -> Checkpoint {
        Checkpoint::from_params(Self::KIND, self.config.to_text(), vocab.tokens().to_vec(), &self.params)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        ckpt.expect_kind(Self::KIND)?;
        let mut m = Self::new(Seq2SeqConfig::from_text(&ckpt.config)?, 0)?;
        ckpt.restore_into(&mut m.params)?;
        Ok(m)
    }
}

/// Linear map from a pooled hidden vector to attribute logits.
#[derive(Debug, Clone)]
pub struct AttributeHead {
    params: ParamSet,
    linear: Linear,
    d_model: usize,
    num_classes: usize,
}

impl AttributeHead {
    pub const KIND: &'static str = "attribute-head";

    pub fn new(d_model: usize, num_classes: usize, seed: u64) -> Result<Self, ModelError> {
        if d_model == 0 || num_classes < 2 {
            return Err(ModelError::InvalidConfig("head needs d_model > 0 and at least 2 classes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let linear = Linear::new(&mut params, "head", d_model, num_classes, &mut rng);
        Ok(Self { params, linear, d_model, num_classes })
    }

    /// Builds a head from explicit weights `[d, classes]` and bias `[classes]`.
    pub fn from_weights(weight: Tensor, bias: Tensor) -> Result<Self, ModelError> {
        let (d, k) = match weight.shape() {
            [d, k] => (*d, *k),
            s => return Err(ModelError::InvalidConfig(format!("head weight must be rank 2, got {s:?}"))),
        };
        let mut head = Self::new(d, k, 0)?;
        head.params.set_value(head.linear.w, weight)?;
        head.params.set_value(head.linear.b, bias)?;
        Ok(head)
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Bound, AutodiffError> {
        self.params.bind(g, trainable)
    }

    /// Logits `[b, classes]` for pooled states `[b, d]`.
    pub fn logits_var(&self, g: &mut Graph, p: &Bound, pooled: Var) -> Result<Var, AutodiffError> {
        self.linear.forward_graph(g, p, pooled)
    }

    pub fn logits(&self, pooled: &[f64]) -> Vec<f64> {
        self.linear.apply(&self.params, pooled)
    }

    pub fn probs(&self, pooled: &[f64]) -> Vec<f64> {
        dist::softmax(&self.logits(pooled))
    }

    pub fn weight(&self) -> &Tensor {
        self.params.value(self.linear.w)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut f = Fields::default();
        f.set("d_model", self.d_model);
        f.set("num_classes", self.num_classes);
        Checkpoint::from_params(Self::KIND, f.to_text(), Vec::new(), &self.params)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        ckpt.expect_kind(Self::KIND)?;
        let f = Fields::parse(&ckpt.config)?;
        let mut m = Self::new(f.get("d_model")?, f.get("num_classes")?, 0)?;
        ckpt.restore_into(&mut m.params)?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::corpus::{MASK, PAD};

    fn small(vocab: usize) -> Seq2SeqConfig {
        Seq2SeqConfig {
            d_model: 16,
            num_heads: 2,
            ff_dim: 24,
            max_len: 16,
            encoder_layers: 1,
            decoder_layers: 2,
            ..Seq2SeqConfig::new(vocab)
        }
    }

    #[test]
    fn decoder_is_causal() {
        let g = Seq2Seq::new(small(20), 1).unwrap();
        let src = [7, 8, 9];
        let a = g.teacher_forced_logits(&src, &[10, 11, 12, 13]).unwrap();
        for t in 0..4 {
            let mut other = vec![10, 11, 12, 13];
            other[t] = 19;
            let b = g.teacher_forced_logits(&src, &other).unwrap();
            // Input position t + 1 holds target token t, so rows 0..=t must not move.
            for row in 0..=t {
                assert_eq!(a.row(row), b.row(row), "row {row} changed when token {t} did");
            }
            assert_ne!(a.row(t + 1), b.row(t + 1));
        }
    }

    #[test]
    fn greedy_decode_contract() {
        let g = Seq2Seq::new(small(20), 2).unwrap();
        let a = g.greedy_decode(&[7, MASK, 9], 5).unwrap();
        assert_eq!(a, g.greedy_decode(&[7, MASK, 9], 5).unwrap());
        assert!(a.len() <= 5);
        assert!(a.iter().all(|&t| t != PAD && t != MASK && !is_blocked(t)));
        assert!(g.greedy_decode(&[7], 100).unwrap().len() <= 15);
    }

    #[test]
    fn stepwise_states_match_teacher_forcing() {
        let g = Seq2Seq::new(small(20), 3).unwrap();
        let enc = g.encode(&[7, 8]).unwrap();
        let h = g.decoder_states(&enc, &[BOS, 10, 11]).unwrap();
        let full = g.teacher_forced_logits(&[7, 8], &[10, 11]).unwrap();
        for t in 0..3 {
            let direct = g.output_logits(h.row(t));
            for (x, y) in direct.iter().zip(full.row(t)) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn parameter_count_matches_formula() {
        for c in [small(20), Seq2SeqConfig::new(60)] {
            assert_eq!(Seq2Seq::new(c.clone(), 0).unwrap().params().num_scalars(), c.param_count());
        }
    }

    #[test]
    fn blocked_distribution_renormalises() {
        let p = next_token_distribution(&[0.0; 10]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(p[PAD], 0.0);
        assert_eq!(p[MASK], 0.0);
        assert!((p[EOS] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        let head = AttributeHead::new(6, 3, 4).unwrap();
        let f = |g: &mut Graph, x: Var| -> Result<Var, AutodiffError> {
            let p = head.bind(g, false)?;
            let logits = head.logits_var(g, &p, x)?;
            g.cross_entropy(logits, &[Some(1)])
        };
        let x = Tensor::new(&[1, 6], vec![0.3, -0.2, 0.5, 0.1, -0.7, 0.9]).unwrap();
        assert!(finite_diff_check(f, &x, 1e-5).unwrap() < 1e-5);
    }

    #[test]
    fn head_checkpoint_round_trip() {
        let head = AttributeHead::new(5, 2, 7).unwrap();
        let back = AttributeHead::from_checkpoint(&Checkpoint::from_bytes(&head.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back.weight(), head.weight());
    }
}
