use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{split_sentences, tokenize, Corpus, CorpusError, Document, Schema, Sentence};

/// One line of a corpus file. Extra fields are ignored on read.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Record {
    pub text: String,
    pub attribute: String,
    pub outcome: String,
}

pub fn read_corpus(content: &str, attribute: &Schema, outcome: &Schema) -> Result<Corpus, CorpusError> {
    let mut documents = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line)
            .map_err(|e| CorpusError::MalformedRecord { line: line_no, reason: e.to_string() })?;
        let a = attribute.index(&rec.attribute).ok_or_else(|| CorpusError::UnknownLabel {
            line: line_no,
            field: "attribute",
            label: rec.attribute.clone(),
        })?;
        let o = outcome.index(&rec.outcome).ok_or_else(|| CorpusError::UnknownLabel {
            line: line_no,
            field: "outcome",
            label: rec.outcome.clone(),
        })?;
        let sentences: Vec<Sentence> = split_sentences(tokenize(&rec.text)).into_iter().map(Sentence::from_tokens).collect();
        if sentences.is_empty() {
            return Err(CorpusError::MalformedRecord { line: line_no, reason: "empty text".into() });
        }
        documents.push(Document { sentences, attribute: a, outcome: o });
    }
    Ok(Corpus { attribute: attribute.clone(), outcome: outcome.clone(), documents })
}

pub fn load_corpus(path: &Path, attribute: &Schema, outcome: &Schema) -> Result<Corpus, CorpusError> {
    let content = fs::read_to_string(path).map_err(|source| CorpusError::Io { path: path.display().to_string(), source })?;
    read_corpus(&content, attribute, outcome)
}

/// Serialises one record per document.
pub fn write_corpus(corpus: &Corpus) -> String {
    let mut out = String::new();
    for d in &corpus.documents {
        let rec = Record {
            text: d.text(),
            attribute: corpus.attribute.classes[d.attribute].clone(),
            outcome: corpus.outcome.classes[d.outcome].clone(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serialises"));
        out.push('\n');
    }
    out
}
