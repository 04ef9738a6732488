//! Comparison systems: rule-based rewriting, weighted decoding, the adversarial autoencoder and
//! the detect-only / perturb-only ablations.

mod rules;

pub use rules::{rule_rewrite, Rule, RuleError, RuleSet};

pub use crate::models::{adv_train, AdvConfig};

use std::collections::BTreeSet;

use crate::decode::{depen_rewrite, DecodeError, PerturbConfig, RewriteResult};
use crate::detect::{detect_pipeline, DetectError, Aggregation, MaskedSentence};
use crate::models::{AttributeHead, EncoderClassifier, ModelError, Seq2Seq};

/// Scales the probability of every flagged id by `alpha`, then renormalizes in place.
pub fn reweight(p: &mut [f64], flagged: &BTreeSet<usize>, alpha: f64) {
    if alpha == 1.0 || flagged.is_empty() {
        return;
    }
    for &id in flagged.range(..p.len()) {
        p[id] *= alpha;
    }
    let total: f64 = p.iter().sum();
    if total > 0.0 {
        p.iter_mut().for_each(|v| *v /= total);
    }
}

/// Greedy decode of the unmasked sentence with flagged token types down-weighted by `alpha` at every step.
pub fn weighted_decode(
    g: &Seq2Seq,
    sentence: &[usize],
    flagged: &BTreeSet<usize>,
    alpha: f64,
    max_len: usize,
) -> Result<Vec<usize>, ModelError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(ModelError::InvalidConfig(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    g.decode_with(sentence, max_len, |p| reweight(p, flagged, alpha))
}

/// Corpus-wide set of token types the detector masked anywhere.
pub fn flagged_types(masked: &[MaskedSentence]) -> BTreeSet<usize> {
    masked.iter().flat_map(|m| m.positions.iter().map(|&i| m.original[i])).collect()
}

/// Detect, then plain greedy infilling.
pub fn den_rewrite(
    f: &EncoderClassifier,
    g: &Seq2Seq,
    sentence: &[usize],
    k: f64,
    max_len: usize,
) -> Result<Vec<usize>, DetectError> {
    let masked = detect_pipeline(f, &[sentence.to_vec()], k, Aggregation::default())?;
    Ok(g.greedy_decode(&masked[0].tokens, max_len)?)
}

/// Perturbed decoding of the original, unmasked sentence, with the same retry rule as the full method.
pub fn pen_rewrite(
    f: &EncoderClassifier,
    g: &Seq2Seq,
    head: &AttributeHead,
    sentence: &[usize],
    cfg: &PerturbConfig,
    max_len: usize,
) -> Result<RewriteResult, DecodeError> {
    depen_rewrite(f, g, head, sentence, cfg, max_len)
}

/// Greedy reconstruction through an adversarially trained autoencoder.
pub fn adv_rewrite(model: &Seq2Seq, sentence: &[usize], max_len: usize) -> Result<Vec<usize>, ModelError> {
    model.greedy_decode(sentence, max_len)
}

/// Full two-stage rewrite: detect and mask, then perturbed infilling with one retry.
pub fn full_rewrite(
    f: &EncoderClassifier,
    g: &Seq2Seq,
    head: &AttributeHead,
    masked: &MaskedSentence,
    cfg: &PerturbConfig,
    max_len: usize,
) -> Result<RewriteResult, DecodeError> {
    depen_rewrite(f, g, head, &masked.tokens, cfg, max_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Graph, Tensor};
    use crate::models::{EncoderClassifierConfig, Seq2SeqConfig};

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

    fn tiny_f() -> EncoderClassifier {
        let mut c = EncoderClassifierConfig::new(16, 2);
        c.encoder.d_model = 8;
        c.encoder.num_heads = 2;
        c.encoder.ff_dim = 8;
        c.encoder.num_layers = 1;
        c.encoder.max_len = 16;
        EncoderClassifier::new(c, 3).unwrap()
    }

    #[test]
    fn reweight_example() {
        let mut p = vec![0.5, 0.3, 0.2];
        reweight(&mut p, &BTreeSet::from([0]), 0.2);
        for (a, b) in p.iter().zip([1.0 / 6.0, 0.5, 1.0 / 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn reweight_scales_ratio_by_alpha() {
        let mut p = vec![0.1, 0.2, 0.3, 0.4];
        let flagged = BTreeSet::from([1, 3]);
        reweight(&mut p, &flagged, 0.3);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((p[1] / p[0] - 0.3 * 2.0).abs() < 1e-12);
        assert!((p[3] / p[2] - 0.3 * 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_decode_reductions() {
        let g = tiny_g();
        for src in [vec![7, 8, 9, 10], vec![11, 12]] {
            let greedy = g.greedy_decode(&src, 10).unwrap();
            assert_eq!(weighted_decode(&g, &src, &BTreeSet::new(), 0.2, 10).unwrap(), greedy);
            assert_eq!(weighted_decode(&g, &src, &BTreeSet::from([7, 9]), 1.0, 10).unwrap(), greedy);
        }
        assert!(weighted_decode(&g, &[7], &BTreeSet::new(), 0.0, 10).is_err());
    }

    #[test]
    fn weighted_decode_avoids_heavily_flagged_tokens() {
        let g = tiny_g();
        let src = vec![7, 8, 9, 10];
        let greedy = g.greedy_decode(&src, 10).unwrap();
        let flagged: BTreeSet<usize> = greedy.iter().copied().collect();
        let out = weighted_decode(&g, &src, &flagged, 1e-9, 10).unwrap();
        assert!(out.iter().all(|t| !flagged.contains(t)) || out.is_empty());
    }

    #[test]
    fn den_equals_unperturbed_decode() {
        let (f, g) = (tiny_f(), tiny_g());
        let head = AttributeHead::new(8, 2, 1).unwrap();
        for s in [vec![7, 8, 9, 10, 11], vec![12, 13, 14]] {
            let den = den_rewrite(&f, &g, &s, 20.0, 10).unwrap();
            let masked = detect_pipeline(&f, &[s.clone()], 20.0, Aggregation::default()).unwrap();
            let plain = full_rewrite(&f, &g, &head, &masked[0], &PerturbConfig::disabled(), 10).unwrap();
            assert_eq!(den, plain.tokens);
            assert_eq!(den, den_rewrite(&f, &g, &s, 20.0, 10).unwrap());
        }
    }

    #[test]
    fn pen_without_perturbation_reconstructs_greedily() {
        let (f, g) = (tiny_f(), tiny_g());
        let head = AttributeHead::new(8, 2, 1).unwrap();
        let s = vec![7, 8, 9];
        let r = pen_rewrite(&f, &g, &head, &s, &PerturbConfig::disabled(), 10).unwrap();
        assert_eq!(r.tokens, g.greedy_decode(&s, 10).unwrap());
    }

    #[test]
    fn flagged_types_collects_masked_ids() {
        let m = MaskedSentence { original: vec![7, 8, 9], tokens: vec![7, 4, 4], positions: vec![1, 2] };
        let n = MaskedSentence { original: vec![9, 10], tokens: vec![4, 10], positions: vec![0] };
        assert_eq!(flagged_types(&[m, n]), BTreeSet::from([8, 9]));
    }

    #[test]
    fn gradient_reversal_contract() {
        for lambda in [0.0, 0.5, 1.0] {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap(), true).unwrap();
            let y = g.grad_reverse(x, lambda).unwrap();
            assert_eq!(g.value(y), g.value(x));
            let w = g.constant(Tensor::new(&[3], vec![0.3, 0.7, -1.1]).unwrap()).unwrap();
            let z = g.mul(y, w).unwrap();
            let s = g.sum(z).unwrap();
            g.backward(s).unwrap();
            let want: Vec<f64> = [0.3, 0.7, -1.1].iter().map(|v| -lambda * v).collect();
            assert_eq!(g.grad(x).unwrap().data(), want.as_slice());
        }
    }
}
