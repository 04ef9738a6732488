//! Synthetic attribute-marked corpora, record-file ingestion, vocabulary and splits.

mod generate;
mod io;
mod tokenize;
mod vocab;

pub use generate::{generate_corpus, CorpusSpec};
pub use io::{load_corpus, read_corpus, write_corpus, Record};
pub use tokenize::{detokenize, split_sentences, tokenize};
pub use vocab::{build_vocabulary, Vocabulary, BOS, CLS, EOS, MASK, PAD, RESERVED, SEP, UNK};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error("lexicons overlap: {0}")]
    Disjointness(String),
    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("line {line}: unknown {field} label {label:?}")]
    UnknownLabel { line: usize, field: &'static str, label: String },
    #[error("degenerate split: sizes {0:?}")]
    DegenerateSplit([usize; 3]),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Named label set, e.g. gender with classes `[female, male]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    pub name: String,
    pub classes: Vec<String>,
}

impl Schema {
    pub fn new(name: &str, classes: &[&str]) -> Result<Self, CorpusError> {
        let s = Self { name: name.to_string(), classes: classes.iter().map(|c| c.to_string()).collect() };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.classes.len() < 2 {
            return Err(CorpusError::InvalidSpec(format!("schema {} needs at least two classes", self.name)));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &self.classes {
            if !seen.insert(c) {
                return Err(CorpusError::InvalidSpec(format!("schema {} repeats class {c}", self.name)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn index(&self, class: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == class)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub text: String,
}

impl Sentence {
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let text = detokenize(&tokens);
        Self { tokens, text }
    }

    pub fn from_text(text: &str) -> Self {
        Self::from_tokens(tokenize(text))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub sentences: Vec<Sentence>,
    pub attribute: usize,
    pub outcome: usize,
}

impl Document {
    pub fn text(&self) -> String {
        let parts: Vec<&str> = self.sentences.iter().map(|s| s.text.as_str()).collect();
        parts.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub attribute: Schema,
    pub outcome: Schema,
    pub documents: Vec<Document>,
}

/// One sentence flattened out of its document, carrying the document labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSentence<'a> {
    pub doc: usize,
    pub index: usize,
    pub sentence: &'a Sentence,
    pub attribute: usize,
    pub outcome: usize,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn num_sentences(&self) -> usize {
        self.documents.iter().map(|d| d.sentences.len()).sum()
    }

    pub fn sentences(&self) -> impl Iterator<Item = LabeledSentence<'_>> {
        self.documents.iter().enumerate().flat_map(|(di, d)| {
            d.sentences.iter().enumerate().map(move |(si, s)| LabeledSentence {
                doc: di,
                index: si,
                sentence: s,
                attribute: d.attribute,
                outcome: d.outcome,
            })
        })
    }

    fn subset(&self, idx: &[usize]) -> Corpus {
        Corpus {
            attribute: self.attribute.clone(),
            outcome: self.outcome.clone(),
            documents: idx.iter().map(|&i| self.documents[i].clone()).collect(),
        }
    }
}

/// Document-level train/valid/test split. Sizes are `round(f * n)` for the first two parts.
pub fn split_corpus(corpus: &Corpus, fractions: [f64; 3], seed: u64) -> Result<[Corpus; 3], CorpusError> {
    let total: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(CorpusError::InvalidSpec(format!("split fractions {fractions:?} must be >= 0 and sum to 1")));
    }
    let n = corpus.len();
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_valid = ((fractions[1] * n as f64).round() as usize).min(n - n_train.min(n));
    let sizes = [n_train.min(n), n_valid, n - n_train.min(n) - n_valid];
    if sizes.iter().any(|&s| s == 0) {
        return Err(CorpusError::DegenerateSplit(sizes));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut parts = [&order[..sizes[0]], &order[sizes[0]..sizes[0] + sizes[1]], &order[sizes[0] + sizes[1]..]]
        .map(|p| p.to_vec());
    parts.iter_mut().for_each(|p| p.sort_unstable());
    Ok([corpus.subset(&parts[0]), corpus.subset(&parts[1]), corpus.subset(&parts[2])])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(n: usize) -> Corpus {
        let docs = (0..n)
            .map(|i| Document { sentences: vec![Sentence::from_text(&format!("doc {i} .") )], attribute: i % 2, outcome: 0 })
            .collect();
        Corpus {
            attribute: Schema::new("a", &["x", "y"]).unwrap(),
            outcome: Schema::new("o", &["p", "q"]).unwrap(),
            documents: docs,
        }
    }

    #[test]
    fn split_sizes_follow_rounding() {
        let [a, b, c] = split_corpus(&corpus(10), [0.8, 0.1, 0.1], 5).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (8, 1, 1));
    }

    #[test]
    fn degenerate_split_rejected() {
        assert!(matches!(split_corpus(&corpus(10), [1.0, 0.0, 0.0], 1), Err(CorpusError::DegenerateSplit(_))));
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let c = corpus(37);
        let first = split_corpus(&c, [0.6, 0.2, 0.2], 9).unwrap();
        let second = split_corpus(&c, [0.6, 0.2, 0.2], 9).unwrap();
        assert_eq!(first, second);
        let mut all: Vec<String> = first.iter().flat_map(|p| p.documents.iter().map(|d| d.text())).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 37);
    }

    #[test]
    fn schema_rejects_duplicates() {
        assert!(Schema::new("a", &["x", "x"]).is_err());
        assert!(Schema::new("a", &["x"]).is_err());
    }
}
