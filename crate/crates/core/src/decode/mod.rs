//! Decoding under the neutralization constraint: decoder hidden states are nudged so that the
//! attribute head's prediction moves toward uniform, then the perturbed next-token distribution
//! is fused with the base one.

use thiserror::Error;

use crate::autodiff::{dist, AutodiffError, Graph, Tensor, Var};
use crate::corpus::{BOS, EOS};
use crate::models::{next_token_distribution, AttributeHead, EncoderClassifier, ModelError, Seq2Seq};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("invalid perturbation config: {0}")]
    InvalidConfig(String),
    #[error("head width {head} does not match decoder width {model}")]
    HeadMismatch { head: usize, model: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbConfig {
    /// η.
    pub step_size: f64,
    pub iters_per_step: usize,
    /// m: forward/backward passes accumulated per update.
    pub accumulation_passes: usize,
    /// γ: weight of the perturbed distribution in the geometric fusion.
    pub fusion_weight: f64,
    /// λ_kl: weight of KL(p_perturbed ‖ p_base) in the perturbation objective.
    pub kl_anchor: f64,
    /// Zero disables clipping.
    pub grad_clip: f64,
    /// Text-classifier confidence above which a rewrite is retried once with doubled η.
    pub retry_threshold: f64,
    /// When false, only the newest row of Δ is optimized; earlier rows keep the values they
    /// ended their own step with.
    pub update_history: bool,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            step_size: 0.02,
            iters_per_step: 3,
            accumulation_passes: 3,
            fusion_weight: 0.8,
            kl_anchor: 0.01,
            grad_clip: 1.0,
            retry_threshold: 0.8,
            update_history: true,
        }
    }
}

impl PerturbConfig {
    /// Settings under which decoding reduces to plain greedy decoding.
    pub fn disabled() -> Self {
        Self { step_size: 0.0, kl_anchor: 0.0, fusion_weight: 1.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        let bad = |m: &str| Err(DecodeError::InvalidConfig(m.to_string()));
        if !(self.step_size >= 0.0 && self.kl_anchor >= 0.0 && self.grad_clip >= 0.0) {
            return bad("step_size, kl_anchor and grad_clip must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.fusion_weight) {
            return bad("fusion_weight must lie in [0, 1]");
        }
        if self.accumulation_passes == 0 {
            return bad("accumulation_passes must be positive");
        }
        Ok(())
    }
}

/// `-(1/|C|) Σ_a ln p_a`: cross-entropy of `p` against the uniform distribution.
pub fn neutralization_loss(p: &[f64]) -> f64 {
    -p.iter().map(|v| v.ln()).sum::<f64>() / p.len() as f64
}

/// Graph form of [`neutralization_loss`] over logits `[1, C]`.
pub fn neutralization_loss_var(g: &mut Graph, logits: Var) -> Result<Var, AutodiffError> {
    let lp = g.log_softmax(logits)?;
    let m = g.mean(lp)?;
    g.scale(m, -1.0)
}

/// `normalize(p_perturbed^γ · p_base^(1-γ))`.
pub fn fuse_next_token(p_perturbed: &[f64], p_base: &[f64], gamma: f64) -> Result<Vec<f64>, dist::DistError> {
    dist::validate(p_perturbed)?;
    dist::validate(p_base)?;
    if p_perturbed.len() != p_base.len() {
        return Err(dist::DistError::SupportMismatch(p_perturbed.len(), p_base.len()));
    }
    if gamma == 0.0 {
        return Ok(p_base.to_vec());
    }
    if gamma == 1.0 {
        return Ok(p_perturbed.to_vec());
    }
    let mut out: Vec<f64> = p_perturbed.iter().zip(p_base).map(|(a, b)| a.powf(gamma) * b.powf(1.0 - gamma)).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    Ok(out)
}

/// Per-sentence decode state: fixed encoder output, generated prefix and its perturbation.
#[derive(Debug, Clone)]
pub struct DecodeState {
    /// BOS followed by generated tokens.
    pub prefix: Vec<usize>,
    /// Unperturbed final-layer decoder states `[t, d]`, one row per prefix position.
    pub hidden: Tensor,
    /// Δ, same shape as `hidden`. Rows for earlier positions persist across steps.
    pub delta: Tensor,
}

impl DecodeState {
    pub fn perturbed(&self) -> Tensor {
        let mut h = self.hidden.clone();
        h.add_assign(&self.delta);
        h
    }

    fn grow(&mut self, hidden: Tensor) {
        let (t, d) = (hidden.shape()[0], hidden.shape()[1]);
        let mut delta = self.delta.data().to_vec();
        delta.resize(t * d, 0.0);
        self.delta = Tensor::new(&[t, d], delta).expect("shape");
        self.hidden = hidden;
    }
}

/// Constant pieces of the output layer reused across perturbation passes.
struct OutputLayer {
    /// `[d, vocab]`.
    embed_t: Tensor,
    bias: Tensor,
}

impl OutputLayer {
    fn new(g: &Seq2Seq) -> Self {
        let (e, b) = g.output_layer();
        let (v, d) = (e.shape()[0], e.shape()[1]);
        let mut t = vec![0.0; v * d];
        for i in 0..v {
            for j in 0..d {
                t[j * v + i] = e.data()[i * d + j];
            }
        }
        Self { embed_t: Tensor::new(&[d, v], t).expect("shape"), bias: b.clone() }
    }
}

/// Builds the perturbation objective at `hidden + delta` and returns (graph, delta var, objective var).
fn objective(
    state: &DecodeState,
    head: &AttributeHead,
    out: Option<(&OutputLayer, &[f64])>,
    kl_anchor: f64,
) -> Result<(Graph, Var, Var, Var), AutodiffError> {
    let (t, d) = (state.hidden.shape()[0], state.hidden.shape()[1]);
    let mut g = Graph::new();
    let h = g.constant(state.hidden.clone())?;
    let delta = g.leaf(state.delta.clone(), true)?;
    let x = g.add(h, delta)?;
    let w = g.constant(Tensor::filled(&[1, t], 1.0 / t as f64))?;
    let pooled = g.matmul(w, x)?;
    let p = head.bind(&mut g, false)?;
    let logits = head.logits_var(&mut g, &p, pooled)?;
    let ntrl = neutralization_loss_var(&mut g, logits)?;
    let mut total = ntrl;
    if let (Some((layer, base_logp)), true) = (out, kl_anchor > 0.0) {
        let last = g.slice(x, 0, t - 1, 1)?;
        let e = g.constant(layer.embed_t.clone())?;
        let b = g.constant(layer.bias.clone())?;
        let z = g.matmul(last, e)?;
        let z = g.add(z, b)?;
        let lp = g.log_softmax(z)?;
        let pp = g.exp(lp)?;
        let base = g.constant(Tensor::new(&[1, base_logp.len()], base_logp.to_vec())?)?;
        let diff = g.sub(lp, base)?;
        let prod = g.mul(pp, diff)?;
        let kl = g.sum(prod)?;
        let kl = g.scale(kl, kl_anchor)?;
        total = g.add(ntrl, kl)?;
    }
    debug_assert_eq!(g.shape(pooled), [1, d]);
    Ok((g, delta, total, ntrl))
}

/// Result of perturbing one decode step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbOutcome {
    /// L_ntrl at the final Δ.
    pub loss: f64,
    /// Set when a non-finite gradient aborted the step; Δ then keeps its previous value.
    pub non_finite: bool,
}

fn perturb(
    state: &mut DecodeState,
    head: &AttributeHead,
    out: Option<(&OutputLayer, &[f64])>,
    cfg: &PerturbConfig,
) -> Result<PerturbOutcome, DecodeError> {
    let m = cfg.accumulation_passes;
    let before = state.delta.clone();
    for _ in 0..cfg.iters_per_step {
        // Frozen models without dropout make every pass identical, so one backward pass is
        // accumulated m times; the sum is bit-for-bit what m separate passes would give.
        let (mut g, delta, total, _) = objective(state, head, out, cfg.kl_anchor)?;
        g.backward(total)?;
        let pass = g.grad(delta).expect("delta requires grad");
        let mut acc = Tensor::zeros(state.delta.shape());
        for _ in 0..m {
            acc.add_assign(pass);
        }
        if !cfg.update_history {
            let d = acc.shape()[1];
            let keep = acc.numel() - d;
            acc.data_mut()[..keep].fill(0.0);
        }
        if !acc.is_finite() {
            state.delta = before;
            let loss = current_loss(state, head);
            return Ok(PerturbOutcome { loss, non_finite: true });
        }
        let norm = acc.norm();
        if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            acc.scale_in_place(cfg.grad_clip / norm);
        }
        acc.scale_in_place(-cfg.step_size / m as f64);
        state.delta.add_assign(&acc);
    }
    Ok(PerturbOutcome { loss: current_loss(state, head), non_finite: false })
}

/// Runs the perturbation loop for the current state. With no output layer given the KL anchor is skipped.
pub fn perturb_hidden(state: &mut DecodeState, head: &AttributeHead, cfg: &PerturbConfig) -> Result<PerturbOutcome, DecodeError> {
    cfg.validate()?;
    perturb(state, head, None, cfg)
}

/// Head distribution on the mean of the perturbed states.
pub fn head_distribution(state: &DecodeState, head: &AttributeHead) -> Vec<f64> {
    head.probs(&mean_rows(&state.perturbed()))
}

fn current_loss(state: &DecodeState, head: &AttributeHead) -> f64 {
    neutralization_loss(&head_distribution(state, head))
}

fn mean_rows(t: &Tensor) -> Vec<f64> {
    let (rows, d) = (t.shape()[0], t.shape()[1]);
    let mut out = vec![0.0; d];
    for r in 0..rows {
        out.iter_mut().zip(t.row(r)).for_each(|(a, b)| *a += b);
    }
    out.iter_mut().for_each(|v| *v /= rows as f64);
    out
}

/// One regenerated sentence with its decode diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct RewriteResult {
    pub tokens: Vec<usize>,
    /// L_ntrl of the final (perturbed) state.
    pub neutral_loss: f64,
    /// Attribute head distribution of the final (perturbed) state.
    pub attribute_distribution: Vec<f64>,
    pub token_count: usize,
    pub non_finite: bool,
    pub empty: bool,
    pub retried: bool,
}

/// Perturbed decoding of `source` (a masked sentence for DePeN, the original for PeN).
/// The encoder runs once; each step perturbs the final decoder states, then emits the argmax
/// of the fused distribution.
pub fn depen_decode(
    g: &Seq2Seq,
    head: &AttributeHead,
    source: &[usize],
    cfg: &PerturbConfig,
    max_len: usize,
) -> Result<RewriteResult, DecodeError> {
    cfg.validate()?;
    if head.d_model() != g.config().d_model {
        return Err(DecodeError::HeadMismatch { head: head.d_model(), model: g.config().d_model });
    }
    let encoded = g.encode(source)?;
    let layer = OutputLayer::new(g);
    let limit = g.max_output_len(max_len);
    let d = g.config().d_model;
    let mut state = DecodeState {
        prefix: vec![BOS],
        hidden: Tensor::zeros(&[1, d]),
        delta: Tensor::zeros(&[1, d]),
    };
    let mut non_finite = false;
    loop {
        state.grow(g.decoder_states(&encoded, &state.prefix)?);
        let t = state.prefix.len();
        let base_logits = g.output_logits(state.hidden.row(t - 1));
        let base_logp = dist::log_softmax(&base_logits);
        if cfg.step_size > 0.0 {
            non_finite |= perturb(&mut state, head, Some((&layer, &base_logp)), cfg)?.non_finite;
        }
        if state.prefix.len() - 1 >= limit {
            break;
        }
        let p_base = next_token_distribution(&base_logits);
        let p_pert = next_token_distribution(&g.output_logits(state.perturbed().row(t - 1)));
        let fused = fuse_next_token(&p_pert, &p_base, cfg.fusion_weight).expect("valid distributions");
        let next = dist::argmax(&fused);
        if next == EOS {
            break;
        }
        state.prefix.push(next);
    }
    let attribute_distribution = head_distribution(&state, head);
    let tokens = state.prefix[1..].to_vec();
    Ok(RewriteResult {
        neutral_loss: neutralization_loss(&attribute_distribution),
        attribute_distribution,
        token_count: tokens.len(),
        empty: tokens.is_empty(),
        tokens,
        non_finite,
        retried: false,
    })
}

/// [`depen_decode`] followed by one retry at doubled η when the text classifier `f` is still
/// more confident than `cfg.retry_threshold` on the rewrite.
pub fn depen_rewrite(
    f: &EncoderClassifier,
    g: &Seq2Seq,
    head: &AttributeHead,
    source: &[usize],
    cfg: &PerturbConfig,
    max_len: usize,
) -> Result<RewriteResult, DecodeError> {
    let first = depen_decode(g, head, source, cfg, max_len)?;
    if cfg.step_size == 0.0 {
        return Ok(first);
    }
    let conf = f.predict_proba(&[first.tokens.clone()])?[0].iter().cloned().fold(0.0, f64::max);
    if conf <= cfg.retry_threshold {
        return Ok(first);
    }
    let boosted = PerturbConfig { step_size: 2.0 * cfg.step_size, ..cfg.clone() };
    let mut second = depen_decode(g, head, source, &boosted, max_len)?;
    second.retried = true;
    Ok(second)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{dist::kl_divergence, finite_diff_check};
    use crate::models::Seq2SeqConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_g() -> Seq2Seq {
        let c = Seq2SeqConfig {
            d_model: 8,
            num_heads: 2,
            ff_dim: 12,
            max_len: 12,
            encoder_layers: 1,
            decoder_layers: 1,
            ..Seq2SeqConfig::new(16)
        };
        Seq2Seq::new(c, 5).unwrap()
    }

    #[test]
    fn loss_examples() {
        assert!((neutralization_loss(&[0.5, 0.5]) - 2f64.ln()).abs() < 1e-15);
        assert!((neutralization_loss(&[0.9, 0.1]) - 1.2040).abs() < 1e-4);
        assert!((neutralization_loss(&[0.25; 4]) - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn loss_is_kl_to_uniform_plus_log_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for c in [2, 3, 4] {
            for _ in 0..200 {
                let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.01..1.0)).collect();
                let s: f64 = raw.iter().sum();
                let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
                let kl = kl_divergence(&dist::uniform(c), &p).unwrap();
                assert!((neutralization_loss(&p) - (c as f64).ln() - kl).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fusion_examples() {
        let a = [0.8, 0.2];
        let b = [0.2, 0.8];
        assert_eq!(fuse_next_token(&a, &b, 0.0).unwrap(), b.to_vec());
        assert_eq!(fuse_next_token(&a, &b, 1.0).unwrap(), a.to_vec());
        let m = fuse_next_token(&a, &b, 0.5).unwrap();
        assert!((m[0] - 0.5).abs() < 1e-12 && (m[1] - 0.5).abs() < 1e-12);
    }

    fn state(t: usize, d: usize, seed: u64) -> DecodeState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DecodeState { prefix: vec![BOS; t], hidden: Tensor::uniform(&[t, d], 1.0, &mut rng), delta: Tensor::zeros(&[t, d]) }
    }

    #[test]
    fn one_step_matches_closed_form() {
        let (t, d) = (3, 4);
        let head = AttributeHead::new(d, 2, 3).unwrap();
        let mut s = state(t, d, 2);
        let pooled = mean_rows(&s.hidden);
        let p = head.probs(&pooled);
        let cfg = PerturbConfig {
            step_size: 0.1,
            iters_per_step: 1,
            grad_clip: 0.0,
            kl_anchor: 0.0,
            update_history: true,
            ..Default::default()
        };
        perturb_hidden(&mut s, &head, &cfg).unwrap();
        // d/dz of -(1/C) Σ log softmax(z) is p - u.
        let w = head.weight();
        for r in 0..t {
            for j in 0..d {
                let grad: f64 = (0..2).map(|k| w.data()[j * 2 + k] * (p[k] - 0.5)).sum::<f64>() / t as f64;
                assert!((s.delta.data()[r * d + j] + 0.1 * grad).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn small_steps_descend() {
        let head = AttributeHead::new(6, 3, 8).unwrap();
        let mut s = state(4, 6, 9);
        let before = current_loss(&s, &head);
        let cfg = PerturbConfig { step_size: 1e-4, kl_anchor: 0.0, ..Default::default() };
        let out = perturb_hidden(&mut s, &head, &cfg).unwrap();
        assert!(out.loss <= before);
        assert!(!out.non_finite);
    }

    #[test]
    fn frozen_history_moves_only_the_newest_row() {
        let head = AttributeHead::new(6, 2, 8).unwrap();
        let mut s = state(4, 6, 9);
        s.delta.data_mut()[..6].fill(0.25);
        let before = s.delta.clone();
        perturb_hidden(&mut s, &head, &PerturbConfig { step_size: 0.5, update_history: false, ..Default::default() }).unwrap();
        assert_eq!(&s.delta.data()[..18], &before.data()[..18]);
        assert!(s.delta.row(3).iter().any(|&v| v != 0.0));
        let mut joint = state(4, 6, 9);
        perturb_hidden(&mut joint, &head, &PerturbConfig { step_size: 0.5, ..Default::default() }).unwrap();
        assert!(joint.delta.row(0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn zero_step_leaves_delta() {
        let head = AttributeHead::new(6, 2, 8).unwrap();
        let mut s = state(4, 6, 9);
        perturb_hidden(&mut s, &head, &PerturbConfig { step_size: 0.0, ..Default::default() }).unwrap();
        assert!(s.delta.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn delta_gradient_matches_finite_differences() {
        let g = tiny_g();
        let layer = OutputLayer::new(&g);
        let head = AttributeHead::new(8, 2, 4).unwrap();
        let s = state(3, 8, 11);
        let base = dist::log_softmax(&g.output_logits(s.hidden.row(2)));
        let f = |graph: &mut Graph, x: Var| -> Result<Var, AutodiffError> {
            let h = graph.constant(s.hidden.clone())?;
            let hx = graph.add(h, x)?;
            let w = graph.constant(Tensor::filled(&[1, 3], 1.0 / 3.0))?;
            let pooled = graph.matmul(w, hx)?;
            let p = head.bind(graph, false)?;
            let logits = head.logits_var(graph, &p, pooled)?;
            let ntrl = neutralization_loss_var(graph, logits)?;
            let last = graph.slice(hx, 0, 2, 1)?;
            let e = graph.constant(layer.embed_t.clone())?;
            let z = graph.matmul(last, e)?;
            let lp = graph.log_softmax(z)?;
            let pp = graph.exp(lp)?;
            let bias_free: Vec<f64> = base.clone();
            let b = graph.constant(Tensor::new(&[1, bias_free.len()], bias_free)?)?;
            let diff = graph.sub(lp, b)?;
            let prod = graph.mul(pp, diff)?;
            let kl = graph.sum(prod)?;
            let kl = graph.scale(kl, 0.3)?;
            graph.add(ntrl, kl)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[3, 8], 0.5, &mut rng);
        assert!(finite_diff_check(f, &x, 1e-5).unwrap() < 1e-5);
    }

    #[test]
    fn disabled_config_reduces_to_greedy() {
        let g = tiny_g();
        let head = AttributeHead::new(8, 2, 4).unwrap();
        for src in [vec![7, 8, 9], vec![10, crate::corpus::MASK, 12, 13], vec![15]] {
            let r = depen_decode(&g, &head, &src, &PerturbConfig::disabled(), 10).unwrap();
            assert_eq!(r.tokens, g.greedy_decode(&src, 10).unwrap());
        }
    }

    #[test]
    fn decoding_is_deterministic_and_leaves_encoder_alone() {
        let g = tiny_g();
        let head = AttributeHead::new(8, 2, 4).unwrap();
        let before = g.encode(&[7, 8, 9]).unwrap();
        let cfg = PerturbConfig { step_size: 0.5, ..Default::default() };
        let a = depen_decode(&g, &head, &[7, 8, 9], &cfg, 10).unwrap();
        let b = depen_decode(&g, &head, &[7, 8, 9], &cfg, 10).unwrap();
        assert_eq!(a, b);
        assert_eq!(g.encode(&[7, 8, 9]).unwrap(), before);
        assert!(a.tokens.len() <= 10);
    }
}
