//! Bias accuracy and confidence, PLL, BLEU-4 and outcome accuracy, plus report assembly.

mod bleu;

pub use bleu::{bleu4, bleu_stats, BleuStats};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::dist;
use crate::models::{EncoderClassifier, MaskedLm, ModelError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("nothing to evaluate")]
    EmptyInput,
    #[error("{candidates} candidates but {references} references")]
    LengthMismatch { candidates: usize, references: usize },
    #[error("no outputs for method {0}")]
    MissingMethodOutputs(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

const BATCH: usize = 64;

fn predict(f: &EncoderClassifier, sentences: &[Vec<usize>]) -> Result<Vec<Vec<f64>>, ModelError> {
    let mut out = Vec::with_capacity(sentences.len());
    for chunk in sentences.chunks(BATCH) {
        out.extend(f.predict_proba(chunk)?);
    }
    Ok(out)
}

/// Accuracy of the argmax against `labels`, and mean probability given to the true label.
pub fn acc_conf(probs: &[Vec<f64>], labels: &[usize]) -> Result<(f64, f64), EvalError> {
    if probs.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if probs.len() != labels.len() {
        return Err(EvalError::LengthMismatch { candidates: probs.len(), references: labels.len() });
    }
    let n = probs.len() as f64;
    let correct = probs.iter().zip(labels).filter(|(p, &y)| dist::argmax(p) == y).count() as f64;
    let conf = probs.iter().zip(labels).map(|(p, &y)| p[y]).sum::<f64>();
    Ok((correct / n, conf / n))
}

/// Held-out attribute classifier's (accuracy, confidence) on rewrites.
pub fn bias_acc_conf(f_eval: &EncoderClassifier, rewrites: &[Vec<usize>], labels: &[usize]) -> Result<(f64, f64), EvalError> {
    if rewrites.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    acc_conf(&predict(f_eval, rewrites)?, labels)
}

pub fn outcome_acc(o_eval: &EncoderClassifier, rewrites: &[Vec<usize>], labels: &[usize]) -> Result<f64, EvalError> {
    if rewrites.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    Ok(acc_conf(&predict(o_eval, rewrites)?, labels)?.0)
}

/// Corpus mean of per-token pseudo-log-likelihood and the number of empty sentences skipped.
pub fn pll(mlm: &MaskedLm, sentences: &[Vec<usize>]) -> Result<(f64, usize), EvalError> {
    let mut total = 0.0;
    let mut scored = 0usize;
    for s in sentences {
        match mlm.pseudo_log_likelihood(s)? {
            Some(v) => {
                total += v;
                scored += 1;
            }
            None => log::warn!("skipping empty sentence in PLL"),
        }
    }
    if scored == 0 {
        return Err(EvalError::EmptyInput);
    }
    Ok((total / scored as f64, sentences.len() - scored))
}

/// Rewritten test sentences of one method, aligned with the originals.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodOutputs {
    pub method: String,
    pub rewrites: Vec<Vec<usize>>,
}

/// Test sentences with gold labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSet {
    pub sentences: Vec<Vec<usize>>,
    pub attributes: Vec<usize>,
    pub outcomes: Vec<usize>,
}

pub struct Scorers<'a> {
    pub f_eval: &'a EncoderClassifier,
    pub o_eval: &'a EncoderClassifier,
    pub mlm: &'a MaskedLm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub sentences: usize,
    pub bias_acc: f64,
    pub bias_conf: f64,
    pub pll: f64,
    pub bleu4: f64,
    pub outcome_acc: f64,
    pub empty_rewrites: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub corpus_id: String,
    pub chance: f64,
    /// Artifact name to CRC32 of its bytes, hex.
    pub checksums: BTreeMap<String, String>,
    pub config: BTreeMap<String, String>,
    pub rows: Vec<ReportRow>,
}

pub const ORIGINAL: &str = "original";

pub fn score_method(scorers: &Scorers<'_>, test: &TestSet, method: &str, rewrites: &[Vec<usize>]) -> Result<ReportRow, EvalError> {
    if rewrites.len() != test.sentences.len() {
        return Err(EvalError::LengthMismatch { candidates: rewrites.len(), references: test.sentences.len() });
    }
    let (bias_acc, bias_conf) = bias_acc_conf(scorers.f_eval, rewrites, &test.attributes)?;
    Ok(ReportRow {
        method: method.to_string(),
        sentences: rewrites.len(),
        bias_acc,
        bias_conf,
        pll: pll(scorers.mlm, rewrites)?.0,
        bleu4: bleu4(rewrites, &test.sentences)?,
        outcome_acc: outcome_acc(scorers.o_eval, rewrites, &test.outcomes)?,
        empty_rewrites: rewrites.iter().filter(|r| r.is_empty()).count(),
    })
}

/// One row for the untouched originals followed by one row per method, in the given order.
pub fn evaluate_system(
    outputs: &[MethodOutputs],
    test: &TestSet,
    scorers: &Scorers<'_>,
    corpus_id: &str,
    checksums: BTreeMap<String, String>,
    config: BTreeMap<String, String>,
) -> Result<EvalReport, EvalError> {
    if test.sentences.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if outputs.is_empty() {
        return Err(EvalError::MissingMethodOutputs("any".into()));
    }
    let mut rows = vec![score_method(scorers, test, ORIGINAL, &test.sentences)?];
    for o in outputs {
        if o.rewrites.is_empty() {
            return Err(EvalError::MissingMethodOutputs(o.method.clone()));
        }
        rows.push(score_method(scorers, test, &o.method, &o.rewrites)?);
    }
    Ok(EvalReport {
        corpus_id: corpus_id.to_string(),
        chance: 1.0 / scorers.f_eval.config().num_classes as f64,
        checksums,
        config,
        rows,
    })
}

#[derive(Serialize)]
struct Header<'a> {
    kind: &'static str,
    corpus_id: &'a str,
    chance: f64,
    checksums: &'a BTreeMap<String, String>,
    config: &'a BTreeMap<String, String>,
}

#[derive(Serialize)]
struct RowLine<'a> {
    kind: &'static str,
    #[serde(flatten)]
    row: &'a ReportRow,
}

impl EvalReport {
    pub fn row(&self, method: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// A header line followed by one JSON object per row.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&Header {
            kind: "header",
            corpus_id: &self.corpus_id,
            chance: self.chance,
            checksums: &self.checksums,
            config: &self.config,
        })
        .expect("serializable");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&serde_json::to_string(&RowLine { kind: "row", row }).expect("serializable"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        #[derive(Deserialize)]
        struct H {
            corpus_id: String,
            chance: f64,
            checksums: BTreeMap<String, String>,
            config: BTreeMap<String, String>,
        }
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let h: H = serde_json::from_str(lines.next().unwrap_or("{}"))?;
        let rows = lines.map(serde_json::from_str).collect::<Result<Vec<ReportRow>, _>>()?;
        Ok(Self { corpus_id: h.corpus_id, chance: h.chance, checksums: h.checksums, config: h.config, rows })
    }

    /// Aligned text table, columns Acc, Conf, PLL, BLEU4, Out.
    pub fn table(&self) -> String {
        let width = self.rows.iter().map(|r| r.method.len()).max().unwrap_or(0).max(8);
        let mut s = String::new();
        let _ = writeln!(s, "corpus {}", self.corpus_id);
        let _ = writeln!(s, "{:<width$}  {:>7}  {:>7}  {:>8}  {:>7}  {:>7}", "method", "Acc", "Conf", "PLL", "BLEU4", "Out");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<width$}  {:>7.4}  {:>7.4}  {:>8.4}  {:>7.4}  {:>7.4}",
                r.method, r.bias_acc, r.bias_conf, r.pll, r.bleu4, r.outcome_acc
            );
        }
        let _ = writeln!(s, "{:<width$}  {:>7.4}  {:>7.4}", "chance", self.chance, self.chance);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{EncoderClassifierConfig, EncoderConfig};

    fn tiny_f(seed: u64) -> EncoderClassifier {
        let mut c = EncoderClassifierConfig::new(20, 2);
        c.encoder.d_model = 8;
        c.encoder.num_heads = 2;
        c.encoder.ff_dim = 8;
        c.encoder.num_layers = 1;
        c.encoder.max_len = 16;
        EncoderClassifier::new(c, seed).unwrap()
    }

    fn tiny_mlm() -> MaskedLm {
        let mut c = EncoderConfig::new(20);
        c.d_model = 8;
        c.num_heads = 2;
        c.ff_dim = 8;
        c.num_layers = 1;
        c.max_len = 16;
        MaskedLm::new(c, 1).unwrap()
    }

    #[test]
    fn perfect_and_uniform_predictions() {
        assert_eq!(acc_conf(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 1]).unwrap(), (1.0, 1.0));
        let (acc, conf) = acc_conf(&[vec![0.5, 0.5], vec![0.5, 0.5]], &[0, 1]).unwrap();
        assert_eq!(conf, 0.5);
        assert_eq!(acc, 0.5);
        assert!(matches!(acc_conf(&[], &[]), Err(EvalError::EmptyInput)));
    }

    #[test]
    fn correct_predictions_carry_at_least_chance_confidence() {
        let probs = vec![vec![0.7, 0.3], vec![0.4, 0.6], vec![0.9, 0.1], vec![0.2, 0.8]];
        let labels = [0, 0, 1, 1];
        let (acc, conf) = acc_conf(&probs, &labels).unwrap();
        assert!(conf <= 1.0 && conf >= acc * 0.5);
    }

    #[test]
    fn untrained_pll_is_uniform() {
        let (v, skipped) = pll(&tiny_mlm(), &[vec![7, 8, 9], vec![], vec![10]]).unwrap();
        assert!((v + 20f64.ln()).abs() < 1e-12);
        assert_eq!(skipped, 1);
    }

    #[test]
    fn pll_mean_is_invariant_to_duplication() {
        let vocab = crate::corpus::Vocabulary::from_tokens(
            crate::corpus::RESERVED.iter().map(|s| s.to_string()).chain((0..13).map(|i| format!("w{i}"))).collect(),
        )
        .unwrap();
        let mut ckpt = tiny_mlm().to_checkpoint(&vocab);
        for (_, t) in ckpt.tensors.iter_mut() {
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v += ((i * 7919) % 13) as f64 * 0.05 - 0.3;
            }
        }
        let m = MaskedLm::from_checkpoint(&ckpt).unwrap();
        let s = vec![vec![7, 8, 9], vec![10, 11, 12, 13]];
        let once = pll(&m, &s).unwrap().0;
        let twice = pll(&m, &[s.clone(), s].concat()).unwrap().0;
        assert!((once - twice).abs() < 1e-12);
        assert_eq!(pll(&m, &[vec![7, 8]]).unwrap(), pll(&m, &[vec![7, 8]]).unwrap());
    }

    fn test_set() -> TestSet {
        TestSet {
            sentences: vec![vec![7, 8, 9, 10], vec![11, 12, 13, 14, 15], vec![16, 17, 18, 19]],
            attributes: vec![0, 1, 0],
            outcomes: vec![1, 1, 0],
        }
    }

    #[test]
    fn original_row_and_determinism() {
        let (f, o, m) = (tiny_f(1), tiny_f(2), tiny_mlm());
        let scorers = Scorers { f_eval: &f, o_eval: &o, mlm: &m };
        let test = test_set();
        let outputs = vec![MethodOutputs { method: "copy".into(), rewrites: test.sentences.clone() }];
        let a = evaluate_system(&outputs, &test, &scorers, "c", BTreeMap::new(), BTreeMap::new()).unwrap();
        let b = evaluate_system(&outputs, &test, &scorers, "c", BTreeMap::new(), BTreeMap::new()).unwrap();
        assert_eq!(a.to_jsonl(), b.to_jsonl());
        assert_eq!(a.rows[0].method, ORIGINAL);
        assert_eq!(a.rows[0].bleu4, 1.0);
        assert_eq!(a.rows[0].outcome_acc, a.rows[1].outcome_acc);
        assert_eq!(EvalReport::from_jsonl(&a.to_jsonl()).unwrap(), a);
        assert!(a.table().contains("chance"));
        for r in &a.rows {
            assert!((0.0..=1.0).contains(&r.bias_acc) && (0.0..=1.0).contains(&r.bias_conf));
            assert!(r.pll <= 0.0);
        }
    }

    #[test]
    fn missing_outputs_rejected() {
        let (f, o, m) = (tiny_f(1), tiny_f(2), tiny_mlm());
        let scorers = Scorers { f_eval: &f, o_eval: &o, mlm: &m };
        let test = test_set();
        assert!(matches!(
            evaluate_system(&[], &test, &scorers, "c", BTreeMap::new(), BTreeMap::new()),
            Err(EvalError::MissingMethodOutputs(_))
        ));
        let short = vec![MethodOutputs { method: "x".into(), rewrites: vec![vec![7]] }];
        assert!(evaluate_system(&short, &test, &scorers, "c", BTreeMap::new(), BTreeMap::new()).is_err());
    }
}
