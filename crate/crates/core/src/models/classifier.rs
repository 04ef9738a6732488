use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{dist, AutodiffError, Bound, ParamId, ParamSet, Tensor, Var};
use crate::corpus::{Vocabulary, CLS, MASK, SEP};

use super::checkpoint::Checkpoint;
use super::config::{EncoderClassifierConfig, EncoderConfig};
use super::layers::{embedding_table, Ctx, Encoder, EvalCtx, Linear, Padded};
use super::ModelError;

const INFERENCE_BATCH: usize = 128;

/// Wraps tokens as `[CLS] tokens [SEP]`, truncating to `max_len`. The flag reports truncation.
pub fn frame_for_encoder(tokens: &[usize], max_len: usize) -> (Vec<usize>, bool) {
    let keep = tokens.len().min(max_len - 2);
    let mut ids = Vec::with_capacity(keep + 2);
    ids.push(CLS);
    ids.extend_from_slice(&tokens[..keep]);
    ids.push(SEP);
    (ids, keep < tokens.len())
}

/// Result of one classifier pass over a framed sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierOutput {
    /// Framed input ids (`[CLS] .. [SEP]`).
    pub input: Vec<usize>,
    pub truncated: bool,
    pub probs: Vec<f64>,
    /// Per layer, shape `[heads, t, t]` over the framed input.
    pub attention: Vec<Tensor>,
}

impl ClassifierOutput {
    /// Rows of the final layer's attention from the CLS query, one per head.
    pub fn cls_attention(&self) -> Vec<&[f64]> {
        self.cls_attention_at(self.attention.len() - 1)
    }

    /// CLS query rows of attention layer `layer`, one per head.
    pub fn cls_attention_at(&self, layer: usize) -> Vec<&[f64]> {
        let a = &self.attention[layer];
        let (h, t) = (a.shape()[0], a.shape()[1]);
        (0..h).map(|k| &a.data()[k * t * t..k * t * t + t]).collect()
    }
}

/// Transformer encoder with a linear head on the CLS state.
#[derive(Debug, Clone)]
pub struct EncoderClassifier {
    config: EncoderClassifierConfig,
    params: ParamSet,
    embed: ParamId,
    encoder: Encoder,
    head: Linear,
}

impl EncoderClassifier {
    pub const KIND: &'static str = "classifier";

    pub fn new(config: EncoderClassifierConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = &config.encoder;
        let mut params = ParamSet::new();
        let embed = embedding_table(&mut params, "embed", e.vocab_size, e.d_model, &mut rng);
        let encoder = Encoder::new(&mut params, "encoder", e.d_model, e.num_layers, e.num_heads, e.ff_dim, e.max_len, &mut rng);
        let head = Linear::new(&mut params, "head", e.d_model, config.num_classes, &mut rng);
        Ok(Self { config, params, embed, encoder, head })
    }

    pub fn config(&self) -> &EncoderClassifierConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Zeroes the learned position table, leaving a bag-of-words model.
    pub fn zero_positions(&mut self) {
        let pos = self.encoder.pos;
        let shape = self.params.value(pos).shape().to_vec();
        self.params.set_value(pos, Tensor::zeros(&shape)).expect("same shape");
    }

    pub fn frame(&self, tokens: &[usize]) -> (Vec<usize>, bool) {
        frame_for_encoder(tokens, self.config.encoder.max_len)
    }

    /// Logits `[b, classes]` and per-layer attention for framed, padded inputs.
    pub(crate) fn run<R: Rng>(&self, c: &mut Ctx<'_, R>, p: &Bound, batch: &Padded) -> Result<(Var, Vec<Var>), AutodiffError> {
        let (h, attn) = self.encoder.forward(c, p, self.embed, batch)?;
        let cls = c.g.slice(h, 1, 0, 1)?;
        let cls = c.g.reshape(cls, &[batch.b, self.config.encoder.d_model])?;
        Ok((self.head.forward(c, p, cls)?, attn))
    }

    /// Full inference, including attention maps, for each raw token sequence.
    pub fn forward(&self, sentences: &[Vec<usize>]) -> Result<Vec<ClassifierOutput>, ModelError> {
        let mut out = Vec::with_capacity(sentences.len());
        for chunk in sentences.chunks(INFERENCE_BATCH) {
            let framed: Vec<_> = chunk.iter().map(|s| self.frame(s)).collect();
            let batch = Padded::new(&framed.iter().map(|(ids, _)| ids.as_slice()).collect::<Vec<_>>());
            let mut c = EvalCtx::eval();
            let p = self.params.bind(&mut c.g, false)?;
            let (logits, attn) = self.run(&mut c, &p, &batch)?;
            let logits = c.g.value(logits);
            let heads = self.config.encoder.num_heads;
            let t = batch.t;
            for (n, (ids, truncated)) in framed.into_iter().enumerate() {
                let len = ids.len();
                let attention = attn
                    .iter()
                    .map(|&a| {
                        let a = c.g.value(a).data();
                        let mut data = Vec::with_capacity(heads * len * len);
                        for h in 0..heads {
                            for q in 0..len {
                                let base = ((n * heads + h) * t + q) * t;
                                data.extend_from_slice(&a[base..base + len]);
                            }
                        }
                        Tensor::new(&[heads, len, len], data).expect("shape")
                    })
                    .collect();
                out.push(ClassifierOutput { input: ids, truncated, probs: dist::softmax(logits.row(n)), attention });
            }
        }
        Ok(out)
    }

    /// Class distributions only.
    pub fn predict_proba(&self, sentences: &[Vec<usize>]) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut out = Vec::with_capacity(sentences.len());
        for chunk in sentences.chunks(INFERENCE_BATCH) {
            let framed: Vec<_> = chunk.iter().map(|s| self.frame(s).0).collect();
            let batch = Padded::new(&framed);
            let mut c = EvalCtx::eval();
            let p = self.params.bind(&mut c.g, false)?;
            let (logits, _) = self.run(&mut c, &p, &batch)?;
            let logits = c.g.value(logits);
            out.extend((0..chunk.len()).map(|n| dist::softmax(logits.row(n))));
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, vocab: &Vocabulary) -> Checkpoint {
        Checkpoint::from_params(Self::KIND, self.config.to_text(), vocab.tokens().to_vec(), &self.params)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        ckpt.expect_kind(Self::KIND)?;
        let mut m = Self::new(EncoderClassifierConfig::from_text(&ckpt.config)?, 0)?;
        ckpt.restore_into(&mut m.params)?;
        Ok(m)
    }
}

/// Encoder with a token-prediction head, used for pseudo-log-likelihood scoring.
///
/// The output layer starts at zero, so an untrained scorer is exactly uniform.
#[derive(Debug, Clone)]
pub struct MaskedLm {
    config: EncoderConfig,
    params: ParamSet,
    embed: ParamId,
    encoder: Encoder,
    out: Linear,
}

impl MaskedLm {
    pub const KIND: &'static str = "mlm";

    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let mut params = ParamSet::new();
        let embed = embedding_table(&mut params, "embed", c.vocab_size, c.d_model, &mut rng);
        let encoder = Encoder::new(&mut params, "encoder", c.d_model, c.num_layers, c.num_heads, c.ff_dim, c.max_len, &mut rng);
        let out = Linear::zeros(&mut params, "mlm", c.d_model, c.vocab_size);
        Ok(Self { config, params, embed, encoder, out })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Token logits `[b, t, vocab]`.
    pub(crate) fn run<R: Rng>(&self, c: &mut Ctx<'_, R>, p: &Bound, batch: &Padded) -> Result<Var, AutodiffError> {
        let (h, _) = self.encoder.forward(c, p, self.embed, batch)?;
        self.out.forward(c, p, h)
    }

    /// Mean per-token log-probability of each true token when it alone is masked. `None` for empty input.
    pub fn pseudo_log_likelihood(&self, tokens: &[usize]) -> Result<Option<f64>, ModelError> {
        if tokens.is_empty() {
            return Ok(None);
        }
        let (framed, _) = frame_for_encoder(tokens, self.config.max_len);
        let n = framed.len() - 2;
        let variants: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                let mut v = framed.clone();
                v[i + 1] = MASK;
                v
            })
            .collect();
        let batch = Padded::new(&variants);
        let mut c = EvalCtx::eval();
        let p = self.params.bind(&mut c.g, false)?;
        let logits = self.run(&mut c, &p, &batch)?;
        let logp = c.g.log_softmax(logits)?;
        let lp = c.g.value(logp);
        let v = self.config.vocab_size;
        let t = batch.t;
        let total: f64 = (0..n).map(|i| lp.data()[(i * t + i + 1) * v + framed[i + 1]]).sum();
        Ok(Some(total / n as f64))
    }

    pub fn to_checkpoint(&self, vocab: &Vocabulary) -> Checkpoint {
        let mut f = super::config::Fields::default();
        self.config.write_fields(&mut f);
        Checkpoint::from_params(Self::KIND, f.to_text(), vocab.tokens().to_vec(), &self.params)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        ckpt.expect_kind(Self::KIND)?;
        let config = EncoderConfig::read_fields(&super::config::Fields::parse(&ckpt.config)?)?;
        let mut m = Self::new(config, 0)?;
        ckpt.restore_into(&mut m.params)?;
        Ok(m)
    }
}
