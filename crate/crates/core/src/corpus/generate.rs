use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{tokenize, Corpus, CorpusError, Document, Schema, Sentence};

/// Recipe for a synthetic corpus with planted single-token attribute markers.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub seed: u64,
    pub num_documents: usize,
    /// Inclusive range.
    pub sentences_per_document: (usize, usize),
    /// Inclusive range of neutral filler tokens per sentence.
    pub fillers_per_sentence: (usize, usize),
    pub attribute: Schema,
    /// One token set per attribute class.
    pub markers: Vec<Vec<String>>,
    /// Probability that a sentence carries one marker of its document's class.
    pub marker_leakage: f64,
    pub outcome: Schema,
    pub outcome_lexicons: Vec<Vec<String>>,
    pub filler: Vec<String>,
    /// Probability that a filler draw comes from the slice of the filler vocabulary
    /// associated with the document's class rather than from the whole vocabulary.
    /// Zero leaves markers as the only attribute signal.
    pub context_tilt: f64,
}

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

impl CorpusSpec {
    /// Reference-letter flavoured corpus: binary gender attribute, binary admission outcome.
    pub fn reference_letters(seed: u64, num_documents: usize, marker_leakage: f64) -> Self {
        Self {
            seed,
            num_documents,
            sentences_per_document: (1, 3),
            fillers_per_sentence: (5, 8),
            attribute: Schema::new("gender", &["female", "male"]).expect("valid"),
            markers: vec![
                words(&["she", "her", "girl", "lovely", "adorable"]),
                words(&["he", "his", "boy", "basketball", "chess"]),
            ],
            marker_leakage,
            outcome: Schema::new("decision", &["admit", "reject"]).expect("valid"),
            outcome_lexicons: vec![
                words(&["excellent", "outstanding", "exceptional", "superb"]),
                words(&["adequate", "mediocre", "average", "weak"]),
            ],
            filler: words(&[
                "the", "student", "worked", "on", "project", "research", "with", "in", "our", "lab", "course", "class",
                "results", "showed", "during", "semester", "team", "a", "and", "of", "paper", "data", "analysis",
                "experiments", "group", "meetings", "reports", "code", "theory", "problems", "seminar", "ideas",
                "tasks", "topics", "questions", "notes", "methods", "skills", "work", "effort",
            ]),
            context_tilt: 0.0,
        }
    }

    pub fn with_context_tilt(mut self, tilt: f64) -> Self {
        self.context_tilt = tilt;
        self
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        self.attribute.validate()?;
        self.outcome.validate()?;
        let bad = |m: String| Err(CorpusError::InvalidSpec(m));
        if !(0.0..=1.0).contains(&self.marker_leakage) {
            return bad(format!("marker_leakage {} outside [0, 1]", self.marker_leakage));
        }
        if !(0.0..=1.0).contains(&self.context_tilt) {
            return bad(format!("context_tilt {} outside [0, 1]", self.context_tilt));
        }
        if self.markers.len() != self.attribute.len() || self.outcome_lexicons.len() != self.outcome.len() {
            return bad("one lexicon per class required".into());
        }
        let (s0, s1) = self.sentences_per_document;
        let (f0, f1) = self.fillers_per_sentence;
        if s0 == 0 || s0 > s1 || f0 > f1 {
            return bad(format!("bad ranges {:?} {:?}", self.sentences_per_document, self.fillers_per_sentence));
        }
        if self.filler.len() < self.attribute.len() {
            return bad("filler vocabulary smaller than class count".into());
        }
        let mut owner: HashMap<&str, String> = HashMap::new();
        let groups = self
            .markers
            .iter()
            .enumerate()
            .map(|(c, m)| (format!("marker[{}]", self.attribute.classes[c]), m))
            .chain(self.outcome_lexicons.iter().enumerate().map(|(c, m)| (format!("outcome[{}]", self.outcome.classes[c]), m)))
            .chain(std::iter::once(("filler".to_string(), &self.filler)));
        for (name, list) in groups {
            if list.is_empty() {
                return bad(format!("{name} lexicon is empty"));
            }
            for tok in list {
                if tokenize(tok) != [tok.clone()] {
                    return bad(format!("{tok:?} in {name} is not a single normalised token"));
                }
                if let Some(prev) = owner.insert(tok, name.clone()) {
                    if prev != name {
                        return Err(CorpusError::Disjointness(format!("{tok:?} in both {prev} and {name}")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Attribute class of a planted marker token.
    pub fn marker_class(&self, token: &str) -> Option<usize> {
        self.markers.iter().position(|m| m.iter().any(|t| t == token))
    }

    pub fn outcome_class(&self, token: &str) -> Option<usize> {
        self.outcome_lexicons.iter().position(|m| m.iter().any(|t| t == token))
    }
}

/// Deterministic in `spec.seed`. Attribute and outcome labels are drawn independently.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus, CorpusError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_classes = spec.attribute.len();
    let group = spec.filler.len() / n_classes;
    let mut documents = Vec::with_capacity(spec.num_documents);
    for _ in 0..spec.num_documents {
        let attribute = rng.gen_range(0..n_classes);
        let outcome = rng.gen_range(0..spec.outcome.len());
        let n_sent = rng.gen_range(spec.sentences_per_document.0..=spec.sentences_per_document.1);
        let mut sentences = Vec::with_capacity(n_sent);
        for _ in 0..n_sent {
            let n_fill = rng.gen_range(spec.fillers_per_sentence.0..=spec.fillers_per_sentence.1);
            let mut tokens: Vec<String> = (0..n_fill)
                .map(|_| {
                    let i = if spec.context_tilt > 0.0 && rng.gen_bool(spec.context_tilt) {
                        attribute * group + rng.gen_range(0..group)
                    } else {
                        rng.gen_range(0..spec.filler.len())
                    };
                    spec.filler[i].clone()
                })
                .collect();
            let lex = &spec.outcome_lexicons[outcome];
            let word = lex[rng.gen_range(0..lex.len())].clone();
            let pos = rng.gen_range(0..=tokens.len());
            tokens.insert(pos, word);
            if rng.gen_bool(spec.marker_leakage) {
                let lex = &spec.markers[attribute];
                let word = lex[rng.gen_range(0..lex.len())].clone();
                let pos = rng.gen_range(0..=tokens.len());
                tokens.insert(pos, word);
            }
            tokens.push(".".to_string());
            sentences.push(Sentence::from_tokens(tokens));
        }
        documents.push(Document { sentences, attribute, outcome });
    }
    Ok(Corpus { attribute: spec.attribute.clone(), outcome: spec.outcome.clone(), documents })
}
