//! Mini-batch AdamW training loops with validation-based early stopping.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{dist, Bound, Graph, OptimizerState, ParamSet, Tensor, Var};
use crate::corpus::{MASK, SEP};

use super::classifier::{frame_for_encoder, EncoderClassifier, MaskedLm};
use super::layers::{mean_pool, Ctx, EvalCtx, Padded};
use super::seq2seq::{AttributeHead, Seq2Seq};
use super::ModelError;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub weight_decay: f64,
    /// Global gradient-norm clip per parameter set; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn classifier(seed: u64) -> Self {
        Self { learning_rate: 1e-4, batch_size: 64, max_epochs: 20, patience: 3, weight_decay: 0.01, grad_clip: 1.0, seed }
    }

    pub fn seq2seq(seed: u64) -> Self {
        Self { batch_size: 8, ..Self::classifier(seed) }
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) || self.grad_clip < 0.0 {
            return Err(ModelError::InvalidConfig("batch_size and learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Extra per-epoch loss terms (e.g. reconstruction and adversary losses), averaged over batches.
    pub components: Vec<f64>,
    pub valid_metric: Option<f64>,
    /// Validation loss used to break ties in `valid_metric`, when the model reports one.
    pub valid_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept, when validation ran.
    pub best_epoch: Option<usize>,
    pub first_batch_loss: f64,
}

impl History {
    pub fn best_metric(&self) -> Option<f64> {
        let e = self.best_epoch?;
        self.epochs.iter().find(|r| r.epoch == e).and_then(|r| r.valid_metric)
    }
}

/// One sentence with a class label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub tokens: Vec<usize>,
    pub label: usize,
}

/// Denoising pair. `source` carries detector masks, or equals `target` when none are available.
#[derive(Debug, Clone, PartialEq)]
pub struct PairExample {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// Adversarial autoencoder weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvConfig {
    pub lambda_rev: f64,
    pub reconstruction_weight: f64,
    pub adversary_weight: f64,
}

impl Default for AdvConfig {
    fn default() -> Self {
        Self { lambda_rev: 1.0, reconstruction_weight: 1.0, adversary_weight: 1.0 }
    }
}

/// Replaces each token by MASK independently with probability `rate`.
pub fn random_mask(tokens: &[usize], rate: f64, rng: &mut impl Rng) -> Vec<usize> {
    tokens.iter().map(|&t| if rate > 0.0 && rng.gen_bool(rate) { MASK } else { t }).collect()
}

pub fn accuracy(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = probs.iter().zip(labels).filter(|(p, &y)| dist::argmax(p) == y).count();
    hits as f64 / labels.len() as f64
}

#[derive(Clone, Copy, PartialEq)]
enum Goal {
    Maximize,
    Minimize,
}

/// One validation pass. Equal metrics (accuracy saturating at 1.0, say) are not a plateau while
/// the loss still falls.
#[derive(Debug, Clone, Copy)]
struct Validation {
    metric: f64,
    loss: Option<f64>,
}

impl From<f64> for Validation {
    fn from(metric: f64) -> Self {
        Self { metric, loss: None }
    }
}

impl Validation {
    fn better_than(&self, other: &Validation, goal: Goal) -> bool {
        match goal {
            Goal::Maximize if self.metric == other.metric => match (self.loss, other.loss) {
                (Some(a), Some(b)) => a < b,
                _ => false,
            },
            Goal::Maximize => self.metric > other.metric,
            Goal::Minimize => self.metric < other.metric,
        }
    }
}

/// Accuracy plus mean cross-entropy of the true class.
fn classification_validation(probs: &[Vec<f64>], labels: &[usize]) -> Validation {
    let ce = probs.iter().zip(labels).map(|(p, &y)| -p[y].max(1e-300).ln()).sum::<f64>() / labels.len().max(1) as f64;
    Validation { metric: accuracy(probs, labels), loss: Some(ce) }
}

struct Step {
    graph: Graph,
    bounds: Vec<Bound>,
    loss: Var,
    components: Vec<f64>,
}

fn fit<M>(
    model: &mut M,
    sets: fn(&mut M) -> Vec<&mut ParamSet>,
    n: usize,
    cfg: &TrainConfig,
    goal: Goal,
    mut step: impl FnMut(&M, &[usize], &mut ChaCha8Rng) -> Result<Step, ModelError>,
    mut validate: impl FnMut(&M) -> Result<Option<Validation>, ModelError>,
) -> Result<History, ModelError> {
    cfg.validate()?;
    if n == 0 {
        return Err(ModelError::EmptyInput);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opts: Vec<OptimizerState> = sets(model)
        .into_iter()
        .map(|ps| OptimizerState::adamw(ps, cfg.learning_rate).with_weight_decay(cfg.weight_decay))
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = History { epochs: Vec::new(), best_epoch: None, first_batch_loss: f64::NAN };
    let mut best: Option<(Validation, Vec<ParamSet>)> = None;
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        let mut components: Vec<f64> = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let Step { mut graph, bounds, loss, components: parts } = step(model, chunk, &mut rng)?;
            let value = graph.value(loss).item();
            if !value.is_finite() {
                return Err(ModelError::Diverged { epoch });
            }
            graph.backward(loss)?;
            for ((ps, b), opt) in sets(model).into_iter().zip(&bounds).zip(&mut opts) {
                ps.zero_grads();
                ps.accumulate_grads(&graph, b);
                if cfg.grad_clip > 0.0 {
                    ps.clip_grad_norm(cfg.grad_clip);
                }
                opt.adamw_step(ps)?;
            }
            if history.first_batch_loss.is_nan() {
                history.first_batch_loss = value;
            }
            total += value;
            components.resize(parts.len(), 0.0);
            components.iter_mut().zip(&parts).for_each(|(a, b)| *a += b);
            batches += 1;
        }
        components.iter_mut().for_each(|c| *c /= batches as f64);
        let valid = validate(model)?;
        let train_loss = total / batches as f64;
        let (valid_metric, valid_loss) = (valid.map(|v| v.metric), valid.and_then(|v| v.loss));
        log::info!("epoch {epoch}: train loss {train_loss:.4}, valid {valid_metric:?}, valid loss {valid_loss:?}");
        history.epochs.push(EpochRecord { epoch, train_loss, components, valid_metric, valid_loss });
        if let Some(v) = valid {
            let improved = best.as_ref().map_or(true, |(b, _)| v.better_than(b, goal));
            if improved {
                best = Some((v, sets(model).into_iter().map(|p| p.clone()).collect()));
                history.best_epoch = Some(epoch);
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    if let Some((_, snapshot)) = best {
        for (ps, saved) in sets(model).into_iter().zip(snapshot) {
            *ps = saved;
        }
    }
    Ok(history)
}

fn distinct_labels(examples: &[LabeledExample]) -> usize {
    examples.iter().map(|e| e.label).collect::<BTreeSet<_>>().len()
}

fn classifier_sets(m: &mut EncoderClassifier) -> Vec<&mut ParamSet> {
    vec![m.params_mut()]
}

/// Sentence-level cross-entropy training; validation accuracy drives early stopping.
pub fn train_classifier(
    model: &mut EncoderClassifier,
    train: &[LabeledExample],
    valid: &[LabeledExample],
    cfg: &TrainConfig,
) -> Result<History, ModelError> {
    if distinct_labels(train) < 2 {
        return Err(ModelError::SingleClass);
    }
    let framed: Vec<Vec<usize>> = train.iter().map(|e| model.frame(&e.tokens).0).collect();
    let valid_tokens: Vec<Vec<usize>> = valid.iter().map(|e| e.tokens.clone()).collect();
    let valid_labels: Vec<usize> = valid.iter().map(|e| e.label).collect();
    let dropout = model.config().encoder.dropout;
    fit(
        model,
        classifier_sets,
        train.len(),
        cfg,
        Goal::Maximize,
        |m, idx, rng| {
            let batch = Padded::new(&idx.iter().map(|&i| framed[i].as_slice()).collect::<Vec<_>>());
            let mut c = Ctx::train(dropout, rng);
            let p = m.params().bind(&mut c.g, true)?;
            let (logits, _) = m.run(&mut c, &p, &batch)?;
            let labels: Vec<_> = idx.iter().map(|&i| Some(train[i].label)).collect();
            let loss = c.g.cross_entropy(logits, &labels)?;
            Ok(Step { graph: c.into_graph(), bounds: vec![p], loss, components: vec![] })
        },
        |m| {
            if valid.is_empty() {
                return Ok(None);
            }
            Ok(Some(classification_validation(&m.predict_proba(&valid_tokens)?, &valid_labels)))
        },
    )
}

fn seq2seq_sets(m: &mut Seq2Seq) -> Vec<&mut ParamSet> {
    vec![m.params_mut()]
}

/// Mean teacher-forced loss over `pairs`, evaluated without dropout.
pub fn reconstruction_loss(model: &Seq2Seq, pairs: &[PairExample]) -> Result<f64, ModelError> {
    let mut total = 0.0;
    for chunk in pairs.chunks(64) {
        let mut c = EvalCtx::eval();
        let p = model.params().bind(&mut c.g, false)?;
        let sources: Vec<_> = chunk.iter().map(|e| e.source.clone()).collect();
        let targets: Vec<_> = chunk.iter().map(|e| e.target.clone()).collect();
        let (loss, _, _) = model.reconstruction_loss(&mut c, &p, &sources, &targets)?;
        total += c.g.value(loss).item() * chunk.len() as f64;
    }
    Ok(total / pairs.len().max(1) as f64)
}

/// Denoising training. Each example is fed with its detector masks or, with probability
/// one half (always, when it has none), with fresh uniform masks at `mask_fraction`.
pub fn train_seq2seq(
    model: &mut Seq2Seq,
    train: &[PairExample],
    valid: &[PairExample],
    cfg: &TrainConfig,
    mask_fraction: f64,
) -> Result<History, ModelError> {
    if !(0.0..=1.0).contains(&mask_fraction) {
        return Err(ModelError::InvalidConfig(format!("mask_fraction {mask_fraction} outside [0, 1]")));
    }
    let dropout = model.config().dropout;
    fit(
        model,
        seq2seq_sets,
        train.len(),
        cfg,
        Goal::Minimize,
        |m, idx, rng| {
            let mut sources = Vec::with_capacity(idx.len());
            let mut targets = Vec::with_capacity(idx.len());
            for &i in idx {
                let ex = &train[i];
                let use_detector = ex.source != ex.target && rng.gen_bool(0.5);
                sources.push(if use_detector { ex.source.clone() } else { random_mask(&ex.target, mask_fraction, rng) });
                targets.push(ex.target.clone());
            }
            let mut c = Ctx::train(dropout, rng);
            let p = m.params().bind(&mut c.g, true)?;
            let (loss, _, _) = m.reconstruction_loss(&mut c, &p, &sources, &targets)?;
            Ok(Step { graph: c.into_graph(), bounds: vec![p], loss, components: vec![] })
        },
        |m| if valid.is_empty() { Ok(None) } else { Ok(Some(reconstruction_loss(m, valid)?.into())) },
    )
}

struct AdvPair<'a> {
    g: &'a mut Seq2Seq,
    d: &'a mut AttributeHead,
}

fn adv_sets<'s>(m: &'s mut AdvPair<'_>) -> Vec<&'s mut ParamSet> {
    vec![m.g.params_mut(), m.d.params_mut()]
}

/// Denoising autoencoder whose pooled encoder state feeds `discriminator` through a gradient
/// reversal layer. Epoch components are `[reconstruction loss, adversary loss]`.
pub fn adv_train(
    model: &mut Seq2Seq,
    discriminator: &mut AttributeHead,
    train: &[LabeledExample],
    valid: &[LabeledExample],
    cfg: &TrainConfig,
    adv: &AdvConfig,
    mask_fraction: f64,
) -> Result<History, ModelError> {
    if !(adv.lambda_rev >= 0.0) {
        return Err(ModelError::InvalidConfig("lambda_rev must be non-negative".into()));
    }
    if discriminator.d_model() != model.config().d_model {
        return Err(ModelError::InvalidConfig("discriminator width differs from model".into()));
    }
    let dropout = model.config().dropout;
    let valid_pairs: Vec<PairExample> =
        valid.iter().map(|e| PairExample { source: e.tokens.clone(), target: e.tokens.clone() }).collect();
    let mut pair = AdvPair { g: model, d: discriminator };
    fit(
        &mut pair,
        adv_sets,
        train.len(),
        cfg,
        Goal::Minimize,
        |m, idx, rng| {
            let sources: Vec<_> = idx.iter().map(|&i| random_mask(&train[i].tokens, mask_fraction, rng)).collect();
            let targets: Vec<_> = idx.iter().map(|&i| train[i].tokens.clone()).collect();
            let labels: Vec<_> = idx.iter().map(|&i| Some(train[i].label)).collect();
            let mut c = Ctx::train(dropout, rng);
            let pg = m.g.params().bind(&mut c.g, true)?;
            let pd = m.d.bind(&mut c.g, true)?;
            let (rec, memory, src) = m.g.reconstruction_loss(&mut c, &pg, &sources, &targets)?;
            let pooled = mean_pool(&mut c, memory, &src)?;
            let reversed = c.g.grad_reverse(pooled, adv.lambda_rev)?;
            let logits = m.d.logits_var(&mut c.g, &pd, reversed)?;
            let adv_loss = c.g.cross_entropy(logits, &labels)?;
            let parts = vec![c.g.value(rec).item(), c.g.value(adv_loss).item()];
            let a = c.g.scale(rec, adv.reconstruction_weight)?;
            let b = c.g.scale(adv_loss, adv.adversary_weight)?;
            let loss = c.g.add(a, b)?;
            Ok(Step { graph: c.into_graph(), bounds: vec![pg, pd], loss, components: parts })
        },
        |m| if valid_pairs.is_empty() { Ok(None) } else { Ok(Some(reconstruction_loss(m.g, &valid_pairs)?.into())) },
    )
}

fn head_sets(m: &mut AttributeHead) -> Vec<&mut ParamSet> {
    vec![m.params_mut()]
}

/// Softmax regression of `head` on fixed feature vectors; validation accuracy drives early stopping.
pub fn fit_head(
    head: &mut AttributeHead,
    features: &[Vec<f64>],
    labels: &[usize],
    valid_features: &[Vec<f64>],
    valid_labels: &[usize],
    cfg: &TrainConfig,
) -> Result<History, ModelError> {
    let d = head.d_model();
    fit(
        head,
        head_sets,
        features.len(),
        cfg,
        Goal::Maximize,
        |m, idx, _| {
            let mut g = Graph::new();
            let data: Vec<f64> = idx.iter().flat_map(|&i| features[i].iter().copied()).collect();
            let x = g.constant(Tensor::new(&[idx.len(), d], data)?)?;
            let p = m.bind(&mut g, true)?;
            let logits = m.logits_var(&mut g, &p, x)?;
            let y: Vec<_> = idx.iter().map(|&i| Some(labels[i])).collect();
            let loss = g.cross_entropy(logits, &y)?;
            Ok(Step { graph: g, bounds: vec![p], loss, components: vec![] })
        },
        |m| {
            if valid_features.is_empty() {
                return Ok(None);
            }
            let probs: Vec<_> = valid_features.iter().map(|f| m.probs(f)).collect();
            Ok(Some(classification_validation(&probs, valid_labels)))
        },
    )
}

/// Trains the decode-time head on mean-pooled decoder states of teacher-forced passes over
/// original sentences (encoder fed the unmasked sentence), with the decoder frozen.
pub fn train_attribute_head(
    head: &mut AttributeHead,
    generator: &Seq2Seq,
    train: &[LabeledExample],
    valid: &[LabeledExample],
    cfg: &TrainConfig,
) -> Result<History, ModelError> {
    if distinct_labels(train) < 2 {
        return Err(ModelError::SingleClass);
    }
    let pooled = |xs: &[LabeledExample]| {
        generator.decoder_pooled(&xs.iter().map(|e| (e.tokens.clone(), e.tokens.clone())).collect::<Vec<_>>())
    };
    let (tf, vf) = (pooled(train)?, pooled(valid)?);
    let tl: Vec<_> = train.iter().map(|e| e.label).collect();
    let vl: Vec<_> = valid.iter().map(|e| e.label).collect();
    fit_head(head, &tf, &tl, &vf, &vl, cfg)
}

/// Fresh linear probe on the frozen generator's mean-pooled encoder states.
/// Returns the probe, its history and its accuracy on `test`.
pub fn train_probe(
    generator: &Seq2Seq,
    train: &[LabeledExample],
    test: &[LabeledExample],
    cfg: &TrainConfig,
) -> Result<(AttributeHead, History, f64), ModelError> {
    let classes = train.iter().chain(test).map(|e| e.label).max().unwrap_or(0) + 1;
    let mut probe = AttributeHead::new(generator.config().d_model, classes.max(2), cfg.seed)?;
    let feats = |xs: &[LabeledExample]| generator.encoder_pooled(&xs.iter().map(|e| e.tokens.clone()).collect::<Vec<_>>());
    let (tf, sf) = (feats(train)?, feats(test)?);
    let tl: Vec<_> = train.iter().map(|e| e.label).collect();
    let sl: Vec<_> = test.iter().map(|e| e.label).collect();
    let history = fit_head(&mut probe, &tf, &tl, &[], &[], cfg)?;
    let probs: Vec<_> = sf.iter().map(|f| probe.probs(f)).collect();
    Ok((probe.clone(), history, accuracy(&probs, &sl)))
}

fn mlm_sets(m: &mut MaskedLm) -> Vec<&mut ParamSet> {
    vec![m.params_mut()]
}

/// Masks each real token with probability `rate` (at least one per sentence). Returns inputs and targets.
fn mlm_batch(framed: &[&[usize]], rate: f64, rng: &mut impl Rng) -> (Padded, Vec<Option<usize>>) {
    let mut inputs = Vec::with_capacity(framed.len());
    let mut per_row = Vec::with_capacity(framed.len());
    for ids in framed {
        let n = ids.len() - 2;
        let mut chosen: Vec<bool> = (0..n).map(|_| rng.gen_bool(rate)).collect();
        if !chosen.iter().any(|&c| c) && n > 0 {
            chosen[rng.gen_range(0..n)] = true;
        }
        let mut input = ids.to_vec();
        let mut targets = vec![None; ids.len()];
        for (j, &c) in chosen.iter().enumerate() {
            if c {
                targets[j + 1] = Some(ids[j + 1]);
                input[j + 1] = MASK;
            }
        }
        inputs.push(input);
        per_row.push(targets);
    }
    let batch = Padded::new(&inputs);
    let mut labels = Vec::with_capacity(batch.b * batch.t);
    for t in per_row {
        labels.extend(t.iter().copied());
        labels.extend(std::iter::repeat(None).take(batch.t - t.len()));
    }
    (batch, labels)
}

/// Masked-token training. The validation metric is the mean masked-token loss under a fixed mask draw,
/// so `exp` of it is the held-out perplexity.
pub fn train_mlm(
    model: &mut MaskedLm,
    train: &[Vec<usize>],
    valid: &[Vec<usize>],
    cfg: &TrainConfig,
    mask_rate: f64,
) -> Result<History, ModelError> {
    let max_len = model.config().max_len;
    let keep = |xs: &[Vec<usize>]| -> Vec<Vec<usize>> {
        xs.iter().filter(|s| !s.is_empty()).map(|s| frame_for_encoder(s, max_len).0).collect()
    };
    let (framed, valid_framed) = (keep(train), keep(valid));
    debug_assert!(framed.iter().all(|f| f.last() == Some(&SEP)));
    let dropout = model.config().dropout;
    let seed = cfg.seed;
    fit(
        model,
        mlm_sets,
        framed.len(),
        cfg,
        Goal::Minimize,
        |m, idx, rng| {
            let rows: Vec<&[usize]> = idx.iter().map(|&i| framed[i].as_slice()).collect();
            let (batch, labels) = mlm_batch(&rows, mask_rate, rng);
            let mut c = Ctx::train(dropout, rng);
            let p = m.params().bind(&mut c.g, true)?;
            let logits = m.run(&mut c, &p, &batch)?;
            let loss = c.g.cross_entropy(logits, &labels)?;
            Ok(Step { graph: c.into_graph(), bounds: vec![p], loss, components: vec![] })
        },
        |m| {
            if valid_framed.is_empty() {
                return Ok(None);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let (mut total, mut count) = (0.0, 0usize);
            for chunk in valid_framed.chunks(64) {
                let rows: Vec<&[usize]> = chunk.iter().map(Vec::as_slice).collect();
                let (batch, labels) = mlm_batch(&rows, mask_rate, &mut rng);
                let mut c = EvalCtx::eval();
                let p = m.params().bind(&mut c.g, false)?;
                let logits = m.run(&mut c, &p, &batch)?;
                let loss = c.g.cross_entropy(logits, &labels)?;
                let n = labels.iter().filter(|l| l.is_some()).count();
                total += c.g.value(loss).item() * n as f64;
                count += n;
            }
            Ok(Some((total / count as f64).into()))
        },
    )
}
