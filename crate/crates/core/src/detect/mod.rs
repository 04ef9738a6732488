//! Attention-based saliency over a trained attribute classifier, and top-k% masking.

use thiserror::Error;

use crate::corpus::{Vocabulary, MASK};
use crate::models::{ClassifierOutput, EncoderClassifier, ModelError};

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("sentence has no maskable tokens")]
    AllSpecial,
    #[error("empty sentence")]
    EmptySentence,
    #[error("k must lie in (0, 100], got {0}")]
    InvalidK(f64),
    #[error("sentence {index}: {source}")]
    Sentence {
        index: usize,
        #[source]
        source: Box<DetectError>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// How the heads of one layer are combined into one attention row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeadAggregation {
    #[default]
    Mean,
    Max,
}

/// Which encoder layers contribute CLS attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LayerSpan {
    /// Mean over every layer.
    #[default]
    All,
    Last,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Aggregation {
    pub heads: HeadAggregation,
    pub layers: LayerSpan,
}

/// Per-token saliency of a sentence. Scores align with the sentence tokens (no CLS/SEP);
/// special tokens score zero and the rest sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub tokens: Vec<usize>,
    pub scores: Vec<f64>,
}

impl SaliencyMap {
    /// Tab-separated `token:score` pairs for audit dumps.
    pub fn dump_line(&self, vocab: &Vocabulary) -> String {
        self.tokens
            .iter()
            .zip(&self.scores)
            .map(|(&t, s)| format!("{}:{s:.6}", vocab.token(t)))
            .collect::<Vec<_>>()
            .join("\t")
    }
}

/// A sentence with its most salient tokens replaced by MASK, one MASK per token.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSentence {
    pub original: Vec<usize>,
    pub tokens: Vec<usize>,
    /// Masked positions in ascending order.
    pub positions: Vec<usize>,
}

/// Saliency from a classifier pass: CLS query rows aggregated over heads, averaged over the
/// selected layers, with special positions zeroed and the remainder renormalised.
pub fn saliency_from_output(output: &ClassifierOutput, tokens: &[usize], agg: Aggregation) -> Result<SaliencyMap, DetectError> {
    if tokens.is_empty() {
        return Err(DetectError::EmptySentence);
    }
    let layers = output.attention.len();
    let selected = match agg.layers {
        LayerSpan::All => 0..layers,
        LayerSpan::Last => layers - 1..layers,
    };
    let per_layer: Vec<Vec<&[f64]>> = selected.map(|l| output.cls_attention_at(l)).collect();
    // The framed input is [CLS] kept-tokens [SEP]; truncated tokens score zero.
    let kept = output.input.len() - 2;
    let mut scores = vec![0.0; tokens.len()];
    for (j, s) in scores.iter_mut().enumerate().take(kept) {
        if Vocabulary::is_special(tokens[j]) {
            continue;
        }
        let layer_scores = per_layer.iter().map(|rows| {
            let col = rows.iter().map(|r| r[j + 1]);
            match agg.heads {
                HeadAggregation::Mean => col.sum::<f64>() / rows.len() as f64,
                HeadAggregation::Max => col.fold(0.0, f64::max),
            }
        });
        *s = layer_scores.sum::<f64>() / per_layer.len() as f64;
    }
    let total: f64 = scores.iter().sum();
    if !(total > 0.0) {
        return Err(DetectError::AllSpecial);
    }
    scores.iter_mut().for_each(|s| *s /= total);
    Ok(SaliencyMap { tokens: tokens.to_vec(), scores })
}

pub fn compute_saliency(f: &EncoderClassifier, tokens: &[usize], agg: Aggregation) -> Result<SaliencyMap, DetectError> {
    compute_saliency_batch(f, &[tokens.to_vec()], agg)?.pop().expect("one sentence")
}

/// Batched saliency; each entry fails independently.
pub fn compute_saliency_batch(
    f: &EncoderClassifier,
    sentences: &[Vec<usize>],
    agg: Aggregation,
) -> Result<Vec<Result<SaliencyMap, DetectError>>, DetectError> {
    let nonempty: Vec<Vec<usize>> = sentences.iter().filter(|s| !s.is_empty()).cloned().collect();
    let mut outputs = f.forward(&nonempty)?.into_iter();
    Ok(sentences
        .iter()
        .map(|s| {
            if s.is_empty() {
                Err(DetectError::EmptySentence)
            } else {
                saliency_from_output(&outputs.next().expect("one output per sentence"), s, agg)
            }
        })
        .collect())
}

/// Number of masks for `n` maskable tokens at `k` percent: `max(1, ceil(k * n / 100))`.
pub fn mask_count(n: usize, k: f64) -> usize {
    ((k * n as f64 / 100.0).ceil() as usize).clamp(1, n.max(1))
}

/// Masks the top `k`% non-special positions by saliency, earlier positions winning ties.
pub fn mask_top_k(saliency: &SaliencyMap, k: f64) -> Result<MaskedSentence, DetectError> {
    if !(k > 0.0 && k <= 100.0) {
        return Err(DetectError::InvalidK(k));
    }
    if saliency.tokens.is_empty() {
        return Err(DetectError::EmptySentence);
    }
    let mut candidates: Vec<usize> =
        (0..saliency.tokens.len()).filter(|&j| !Vocabulary::is_special(saliency.tokens[j])).collect();
    if candidates.is_empty() {
        return Err(DetectError::AllSpecial);
    }
    let count = mask_count(candidates.len(), k);
    candidates.sort_by(|&a, &b| saliency.scores[b].total_cmp(&saliency.scores[a]).then(a.cmp(&b)));
    let mut positions = candidates[..count].to_vec();
    positions.sort_unstable();
    let mut tokens = saliency.tokens.clone();
    for &p in &positions {
        tokens[p] = MASK;
    }
    Ok(MaskedSentence { original: saliency.tokens.clone(), tokens, positions })
}

/// Saliency plus masking for every sentence of a document, in order.
pub fn detect_pipeline(
    f: &EncoderClassifier,
    sentences: &[Vec<usize>],
    k: f64,
    agg: Aggregation,
) -> Result<Vec<MaskedSentence>, DetectError> {
    compute_saliency_batch(f, sentences, agg)?
        .into_iter()
        .enumerate()
        .map(|(index, s)| {
            s.and_then(|s| mask_top_k(&s, k))
                .map_err(|e| DetectError::Sentence { index, source: Box::new(e) })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::EncoderClassifierConfig;
    use proptest::prelude::*;

    fn map(scores: &[f64]) -> SaliencyMap {
        SaliencyMap { tokens: (10..10 + scores.len()).collect(), scores: scores.to_vec() }
    }

    fn tiny() -> EncoderClassifier {
        let mut c = EncoderClassifierConfig::new(30, 2);
        c.encoder.d_model = 16;
        c.encoder.num_heads = 2;
        c.encoder.ff_dim = 16;
        c.encoder.max_len = 16;
        EncoderClassifier::new(c, 3).unwrap()
    }

    #[test]
    fn mask_counts() {
        let m = mask_top_k(&map(&[0.1; 10]), 20.0).unwrap();
        assert_eq!(m.positions.len(), 2);
        let all = mask_top_k(&map(&[0.1; 7]), 100.0).unwrap();
        assert_eq!(all.positions, (0..7).collect::<Vec<_>>());
        assert!(all.tokens.iter().all(|&t| t == MASK));
        assert_eq!(mask_top_k(&map(&[1.0]), 1.0).unwrap().positions, vec![0]);
    }

    #[test]
    fn ties_go_to_earlier_positions() {
        let m = mask_top_k(&map(&[0.4, 0.4, 0.2]), 34.0).unwrap();
        assert_eq!(m.positions, vec![0, 1]);
        let m = mask_top_k(&map(&[0.2, 0.4, 0.4]), 30.0).unwrap();
        assert_eq!(m.positions, vec![1]);
    }

    #[test]
    fn invalid_k_and_empty_input() {
        assert!(matches!(mask_top_k(&map(&[1.0]), 0.0), Err(DetectError::InvalidK(_))));
        assert!(matches!(mask_top_k(&map(&[1.0]), 100.5), Err(DetectError::InvalidK(_))));
        assert!(matches!(mask_top_k(&map(&[]), 20.0), Err(DetectError::EmptySentence)));
    }

    #[test]
    fn single_token_has_all_saliency() {
        let s = compute_saliency(&tiny(), &[12], Aggregation::default()).unwrap();
        assert_eq!(s.scores, vec![1.0]);
    }

    #[test]
    fn special_tokens_score_zero() {
        let s = compute_saliency(&tiny(), &[12, MASK, 13], Aggregation { heads: HeadAggregation::Max, layers: LayerSpan::Last }).unwrap();
        assert_eq!(s.scores[1], 0.0);
        assert!((s.scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(matches!(compute_saliency(&tiny(), &[MASK, MASK], Aggregation::default()), Err(DetectError::AllSpecial)));
    }

    #[test]
    fn repeated_tokens_score_equally_without_positions() {
        let mut f = tiny();
        f.zero_positions();
        let s = compute_saliency(&f, &[15, 15, 15, 15], Aggregation::default()).unwrap();
        for v in &s.scores {
            assert!((v - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn pipeline_keeps_order_and_is_deterministic() {
        let f = tiny();
        let doc = vec![vec![10, 11, 12], vec![13, 14], vec![15, 16, 17, 18, 19]];
        let a = detect_pipeline(&f, &doc, 20.0, Aggregation::default()).unwrap();
        assert_eq!(a.len(), 3);
        for (m, s) in a.iter().zip(&doc) {
            assert_eq!(&m.original, s);
        }
        assert_eq!(a, detect_pipeline(&f, &doc, 20.0, Aggregation::default()).unwrap());
        let err = detect_pipeline(&f, &[vec![10], vec![]], 20.0, Aggregation::default()).unwrap_err();
        assert!(matches!(err, DetectError::Sentence { index: 1, .. }));
    }

    proptest! {
        #[test]
        fn mask_count_law_and_monotonicity(
            scores in proptest::collection::vec(0u8..5, 1..30),
            k1 in 1u32..100, k2 in 1u32..=100,
        ) {
            let s = map(&scores.iter().map(|&v| v as f64).collect::<Vec<_>>());
            let (lo, hi) = (k1.min(k2) as f64, k1.max(k2) as f64);
            let a = mask_top_k(&s, lo).unwrap();
            let b = mask_top_k(&s, hi).unwrap();
            let n = scores.len();
            prop_assert_eq!(a.positions.len(), ((lo * n as f64 / 100.0).ceil() as usize).max(1));
            prop_assert!(a.positions.iter().all(|p| b.positions.contains(p)));
        }
    }
}
