//! End-to-end commands over an output directory: corpus generation, training, detection,
//! rewriting and evaluation. Every artifact is written atomically.

mod config;

pub use config::RunConfig;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{self, RuleSet};
use crate::corpus::{self, Corpus, CorpusError, CorpusSpec, Schema, Vocabulary};
use crate::decode::{self, DecodeError};
use crate::detect::{self, DetectError, MaskedSentence};
use crate::eval::{self, EvalError, EvalReport, MethodOutputs, Scorers, TestSet};
use crate::models::{
    self, AttributeHead, Checkpoint, EncoderClassifier, EncoderClassifierConfig, History, LabeledExample, MaskedLm,
    ModelError, PairExample, Seq2Seq,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error at {key}: {reason}")]
    Config { key: String, reason: String },
    #[error("missing artifact {0}; run the command that produces it first")]
    MissingArtifact(PathBuf),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed artifact {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("non-finite values in {0}")]
    NonFinite(String),
}

impl PipelineError {
    /// 2 for configuration problems, 3 for data problems, 4 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config { .. } | PipelineError::MissingArtifact(_) => 2,
            PipelineError::NonFinite(_) => 4,
            PipelineError::Model(e) if e.is_numeric() => 4,
            PipelineError::Model(ModelError::InvalidConfig(_)) => 2,
            PipelineError::Detect(DetectError::Model(e)) if e.is_numeric() => 4,
            PipelineError::Decode(DecodeError::Model(e)) if e.is_numeric() => 4,
            PipelineError::Decode(DecodeError::InvalidConfig(_)) => 2,
            _ => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Depen,
    Den,
    Pen,
    Rb,
    Wd,
    Adv,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::Depen, Method::Den, Method::Pen, Method::Rb, Method::Wd, Method::Adv];

    pub fn name(self) -> &'static str {
        match self {
            Method::Depen => "depen",
            Method::Den => "den",
            Method::Pen => "pen",
            Method::Rb => "rb",
            Method::Wd => "wd",
            Method::Adv => "adv",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| PipelineError::Config { key: "method".into(), reason: format!("unknown method {s:?}") })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenCorpus,
    TrainClassifier,
    TrainSeq2Seq,
    TrainHeads,
    Detect,
    Rewrite(Method),
    Evaluate,
    Report,
}

/// File locations under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn join(&self, parts: &[&str]) -> PathBuf {
        parts.iter().fold(self.root.clone(), |p, s| p.join(s))
    }

    pub fn split(&self, name: &str) -> PathBuf {
        self.join(&["corpus", &format!("{name}.jsonl")])
    }
    pub fn schema(&self) -> PathBuf {
        self.join(&["corpus", "schema.json"])
    }
    pub fn vocab(&self) -> PathBuf {
        self.join(&["corpus", "vocab.txt"])
    }
    pub fn model(&self, name: &str) -> PathBuf {
        self.join(&["models", &format!("{name}.ckpt")])
    }
    pub fn log(&self, name: &str) -> PathBuf {
        self.join(&["logs", &format!("{name}.json")])
    }
    pub fn masked(&self) -> PathBuf {
        self.join(&["detect", "masked.jsonl"])
    }
    pub fn saliency(&self) -> PathBuf {
        self.join(&["detect", "saliency.tsv"])
    }
    pub fn rewrites(&self, m: Method) -> PathBuf {
        self.join(&["rewrites", &format!("{m}.jsonl")])
    }
    pub fn report(&self) -> PathBuf {
        self.join(&["report", "report.jsonl"])
    }
    pub fn table(&self) -> PathBuf {
        self.join(&["report", "table.txt"])
    }
}

/// Writes via a sibling temp file and a rename, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let io = |source| PipelineError::Io { path: path.to_path_buf(), source };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, PipelineError> {
    if !path.exists() {
        return Err(PipelineError::MissingArtifact(path.to_path_buf()));
    }
    fs::read(path).map_err(|source| PipelineError::Io { path: path.to_path_buf(), source })
}

fn read_text(path: &Path) -> Result<String, PipelineError> {
    String::from_utf8(read_bytes(path)?)
        .map_err(|e| PipelineError::Malformed { path: path.to_path_buf(), reason: e.to_string() })
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, PipelineError> {
    read_text(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PipelineError::Malformed {
                path: path.to_path_buf(),
                reason: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    items.iter().map(|x| serde_json::to_string(x).expect("serializable") + "\n").collect()
}

pub fn checksum(bytes: &[u8]) -> String {
    format!("{:08x}", crc32fast::hash(bytes))
}

/// A checkpoint already ends with the CRC-32 of its body. Hashing the whole file would give the
/// CRC residue constant for every checkpoint, so the stored trailer is reported instead.
fn checkpoint_checksum(bytes: &[u8]) -> String {
    match bytes.len().checked_sub(4) {
        Some(n) => format!("{:08x}", u32::from_le_bytes(bytes[n..].try_into().expect("four bytes"))),
        None => checksum(bytes),
    }
}

#[derive(Serialize, Deserialize)]
struct SchemaFile {
    attribute: (String, Vec<String>),
    outcome: (String, Vec<String>),
}

/// One sentence with its document labels, as vocabulary ids.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceRow {
    pub tokens: Vec<usize>,
    pub attribute: usize,
    pub outcome: usize,
}

/// Loaded corpus splits with the training vocabulary.
pub struct Data {
    pub vocab: Vocabulary,
    pub attribute: Schema,
    pub outcome: Schema,
    pub train: Vec<SentenceRow>,
    pub valid: Vec<SentenceRow>,
    pub test: Vec<SentenceRow>,
    pub corpus_id: String,
}

fn rows(corpus: &Corpus, vocab: &Vocabulary) -> Vec<SentenceRow> {
    corpus
        .sentences()
        .map(|s| SentenceRow { tokens: vocab.encode(&s.sentence.tokens), attribute: s.attribute, outcome: s.outcome })
        .collect()
}

fn attribute_examples(rows: &[SentenceRow]) -> Vec<LabeledExample> {
    rows.iter().map(|r| LabeledExample { tokens: r.tokens.clone(), label: r.attribute }).collect()
}

fn outcome_examples(rows: &[SentenceRow]) -> Vec<LabeledExample> {
    rows.iter().map(|r| LabeledExample { tokens: r.tokens.clone(), label: r.outcome }).collect()
}

impl Data {
    pub fn load(layout: &Layout) -> Result<Self, PipelineError> {
        let schema_path = layout.schema();
        let sf: SchemaFile = serde_json::from_str(&read_text(&schema_path)?)
            .map_err(|e| PipelineError::Malformed { path: schema_path.clone(), reason: e.to_string() })?;
        fn as_refs(v: &[String]) -> Vec<&str> {
            v.iter().map(String::as_str).collect()
        }
        let attribute = Schema::new(&sf.attribute.0, &as_refs(&sf.attribute.1))?;
        let outcome = Schema::new(&sf.outcome.0, &as_refs(&sf.outcome.1))?;
        let vocab_path = layout.vocab();
        let vocab = Vocabulary::from_tokens(read_text(&vocab_path)?.lines().map(String::from).collect())
            .ok_or_else(|| PipelineError::Malformed { path: vocab_path, reason: "bad vocabulary".into() })?;
        let mut crc = crc32fast::Hasher::new();
        let mut split = |name: &str| -> Result<Vec<SentenceRow>, PipelineError> {
            let text = read_text(&layout.split(name))?;
            crc.update(text.as_bytes());
            Ok(rows(&corpus::read_corpus(&text, &attribute, &outcome)?, &vocab))
        };
        let (train, valid, test) = (split("train")?, split("valid")?, split("test")?);
        let corpus_id = format!("{}-{:08x}", attribute.name, crc.finalize());
        Ok(Self { vocab, attribute, outcome, train, valid, test, corpus_id })
    }

    pub fn test_set(&self) -> TestSet {
        TestSet {
            sentences: self.test.iter().map(|r| r.tokens.clone()).collect(),
            attributes: self.test.iter().map(|r| r.attribute).collect(),
            outcomes: self.test.iter().map(|r| r.outcome).collect(),
        }
    }
}

fn save_checkpoint(layout: &Layout, name: &str, ckpt: &Checkpoint) -> Result<(), PipelineError> {
    write_atomic(&layout.model(name), &ckpt.to_bytes())
}

fn load_checkpoint(layout: &Layout, name: &str) -> Result<Checkpoint, PipelineError> {
    Ok(Checkpoint::from_bytes(&read_bytes(&layout.model(name))?)?)
}

fn save_history(layout: &Layout, name: &str, h: &History) -> Result<(), PipelineError> {
    write_atomic(&layout.log(name), serde_json::to_string_pretty(h).expect("serializable").as_bytes())
}

fn check_history(name: &str, h: &History) -> Result<(), PipelineError> {
    if h.epochs.iter().any(|e| !e.train_loss.is_finite()) {
        return Err(PipelineError::NonFinite(name.into()));
    }
    log::info!(
        "trained {name}: epochs={} best_epoch={:?} best_valid={:?} last_loss={:.4}",
        h.epochs.len(),
        h.best_epoch,
        h.best_metric(),
        h.epochs.last().map(|e| e.train_loss).unwrap_or(f64::NAN)
    );
    Ok(())
}

/// Seeds for the independently initialised models of one run.
mod seeds {
    pub const DETECTOR: u64 = 1;
    pub const F_EVAL: u64 = 2;
    pub const O_EVAL: u64 = 3;
    pub const MLM: u64 = 4;
    pub const SEQ2SEQ: u64 = 5;
    pub const ADV: u64 = 6;
    pub const HEAD: u64 = 7;
    pub const SPLIT: u64 = 8;
}

fn sub_seed(cfg: &RunConfig, k: u64) -> u64 {
    cfg.seed.wrapping_mul(1000).wrapping_add(k)
}

pub fn gen_corpus(cfg: &RunConfig, layout: &Layout) -> Result<String, PipelineError> {
    let total = cfg.corpus_train_docs + cfg.corpus_valid_docs + cfg.corpus_test_docs;
    let spec = CorpusSpec::reference_letters(cfg.seed, total, cfg.corpus_p_leak).with_context_tilt(cfg.corpus_context_tilt);
    let corpus = corpus::generate_corpus(&spec)?;
    let fractions = [cfg.corpus_train_docs, cfg.corpus_valid_docs, cfg.corpus_test_docs].map(|n| n as f64 / total as f64);
    let [train, valid, test] = corpus::split_corpus(&corpus, fractions, sub_seed(cfg, seeds::SPLIT))?;
    let vocab = corpus::build_vocabulary(&train.documents, 1);
    for (name, part) in [("train", &train), ("valid", &valid), ("test", &test)] {
        write_atomic(&layout.split(name), corpus::write_corpus(part).as_bytes())?;
    }
    let sf = SchemaFile {
        attribute: (corpus.attribute.name.clone(), corpus.attribute.classes.clone()),
        outcome: (corpus.outcome.name.clone(), corpus.outcome.classes.clone()),
    };
    write_atomic(&layout.schema(), serde_json::to_string(&sf).expect("serializable").as_bytes())?;
    write_atomic(&layout.vocab(), (vocab.tokens().join("\n") + "\n").as_bytes())?;
    Ok(format!(
        "documents train={} valid={} test={} sentences={} vocab={}",
        train.len(),
        valid.len(),
        test.len(),
        corpus.num_sentences(),
        vocab.len()
    ))
}

fn classifier(cfg: &RunConfig, data: &Data, classes: usize, seed: u64) -> Result<EncoderClassifier, PipelineError> {
    let c = EncoderClassifierConfig { encoder: cfg.encoder_config(data.vocab.len()), num_classes: classes };
    Ok(EncoderClassifier::new(c, seed)?)
}

/// Detector, evaluation classifiers and the PLL scorer; all trained on original text only.
pub fn train_classifiers(cfg: &RunConfig, layout: &Layout) -> Result<String, PipelineError> {
    let data = Data::load(layout)?;
    let mut summary = Vec::new();
    let jobs = [
        ("detector", seeds::DETECTOR, data.attribute.len(), true),
        ("f_eval", seeds::F_EVAL, data.attribute.len(), true),
        ("o_eval", seeds::O_EVAL, data.outcome.len(), false),
    ];
    for (name, k, classes, on_attribute) in jobs {
        let seed = sub_seed(cfg, k);
        let mut model = classifier(cfg, &data, classes, seed)?;
        let (train, valid) = if on_attribute {
            (attribute_examples(&data.train), attribute_examples(&data.valid))
        } else {
            (outcome_examples(&data.train), outcome_examples(&data.valid))
        };
        let h = models::train_classifier(&mut model, &train, &valid, &cfg.classifier_training(seed))?;
        check_history(name, &h)?;
        save_history(layout, name, &h)?;
        save_checkpoint(layout, name, &model.to_checkpoint(&data.vocab))?;
        summary.push(format!("{name} valid_acc={:.4}", h.best_metric().unwrap_or(f64::NAN)));
    }
    let seed = sub_seed(cfg, seeds::MLM);
    let mut mlm = MaskedLm::new(cfg.encoder_config(data.vocab.len()), seed)?;
    let tokens = |rows: &[SentenceRow]| rows.iter().map(|r| r.tokens.clone()).collect::<Vec<_>>();
    let h = models::train_mlm(&mut mlm, &tokens(&data.train), &tokens(&data.valid), &cfg.mlm_training(seed), 0.15)?;
    check_history("mlm", &h)?;
    save_history(layout, "mlm", &h)?;
    save_checkpoint(layout, "mlm", &mlm.to_checkpoint(&data.vocab))?;
    summary.push(format!("mlm valid_ce={:.4}", h.best_metric().unwrap_or(f64::NAN)));
    Ok(summary.join(" "))
}

fn load_classifier(layout: &Layout, name: &str) -> Result<EncoderClassifier, PipelineError> {
    Ok(EncoderClassifier::from_checkpoint(&load_checkpoint(layout, name)?)?)
}

fn masked_pairs(f: &EncoderClassifier, rows: &[SentenceRow], cfg: &RunConfig) -> Result<Vec<PairExample>, PipelineError> {
    let sentences: Vec<Vec<usize>> = rows.iter().map(|r| r.tokens.clone()).collect();
    let masked = detect_all(f, &sentences, cfg)?;
    Ok(masked.into_iter().map(|m| PairExample { source: m.tokens, target: m.original }).collect())
}

/// Detector masking in parallel chunks; empty sentences pass through unmasked.
fn detect_all(f: &EncoderClassifier, sentences: &[Vec<usize>], cfg: &RunConfig) -> Result<Vec<MaskedSentence>, PipelineError> {
    let results = parallel_map(sentences, cfg.workers, |s| -> Result<MaskedSentence, DetectError> {
        if s.is_empty() {
            return Ok(MaskedSentence { original: vec![], tokens: vec![], positions: vec![] });
        }
        let sal = detect::compute_saliency(f, s, cfg.detect_aggregation)?;
        detect::mask_top_k(&sal, cfg.detect_k)
    });
    results.into_iter().collect::<Result<Vec<_>, _>>().map_err(Into::into)
}

/// The infilling generator and the adversarial autoencoder.
pub fn train_generators(cfg: &RunConfig, layout: &Layout) -> Result<String, PipelineError> {
    let data = Data::load(layout)?;
    let f = load_classifier(layout, "detector")?;
    let train = masked_pairs(&f, &data.train, cfg)?;
    let valid = masked_pairs(&f, &data.valid, cfg)?;
    let seed = sub_seed(cfg, seeds::SEQ2SEQ);
    let mut g = Seq2Seq::new(cfg.seq2seq_config(data.vocab.len()), seed)?;
    let t0 = Instant::now();
    let h = models::train_seq2seq(&mut g, &train, &valid, &cfg.seq2seq_training(seed), cfg.train_mask_fraction)?;
    log::info!("seq2seq training took {:.1}s", t0.elapsed().as_secs_f64());
    check_history("seq2seq", &h)?;
    save_history(layout, "seq2seq", &h)?;
    save_checkpoint(layout, "seq2seq", &g.to_checkpoint(&data.vocab))?;

    let seed = sub_seed(cfg, seeds::ADV);
    let mut adv = Seq2Seq::new(cfg.seq2seq_config(data.vocab.len()), seed)?;
    let mut disc = AttributeHead::new(cfg.model_d_model, data.attribute.len(), seed)?;
    let t0 = Instant::now();
    let ha = models::adv_train(
        &mut adv,
        &mut disc,
        &attribute_examples(&data.train),
        &attribute_examples(&data.valid),
        &cfg.adv_training(seed),
        &cfg.adv,
        cfg.train_mask_fraction,
    )?;
    log::info!("adversarial training took {:.1}s", t0.elapsed().as_secs_f64());
    check_history("adv", &ha)?;
    save_history(layout, "adv", &ha)?;
    save_checkpoint(layout, "adv", &adv.to_checkpoint(&data.vocab))?;
    save_checkpoint(layout, "adv_discriminator", &disc.to_checkpoint())?;
    Ok(format!(
        "seq2seq valid_loss={:.4} adv valid_loss={:.4}",
        h.best_metric().unwrap_or(f64::NAN),
        ha.best_metric().unwrap_or(f64::NAN)
    ))
}

fn load_seq2seq(layout: &Layout, name: &str) -> Result<Seq2Seq, PipelineError> {
    Ok(Seq2Seq::from_checkpoint(&load_checkpoint(layout, name)?)?)
}

/// Attribute head on pooled decoder states of the frozen generator.
pub fn train_heads(cfg: &RunConfig, layout: &Layout) -> Result<String, PipelineError> {
    let data = Data::load(layout)?;
    let g = load_seq2seq(layout, "seq2seq")?;
    let seed = sub_seed(cfg, seeds::HEAD);
    let mut head = AttributeHead::new(cfg.model_d_model, data.attribute.len(), seed)?;
    let h = models::train_attribute_head(
        &mut head,
        &g,
        &attribute_examples(&data.train),
        &attribute_examples(&data.valid),
        &cfg.head_training(seed),
    )?;
    check_history("head", &h)?;
    save_history(layout, "head", &h)?;
    save_checkpoint(layout, "head", &head.to_checkpoint())?;
    Ok(format!("head valid_acc={:.4}", h.best_metric().unwrap_or(f64::NAN)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedRecord {
    pub index: usize,
    pub original: String,
    pub masked: String,
    pub positions: Vec<usize>,
}

/// Masks the test split and writes the masked sentences plus a saliency audit dump.
pub fn detect_test(cfg: &RunConfig, layout: &Layout) -> Result<String, PipelineError> {
    let data = Data::load(layout)?;
    let f = load_classifier(layout, "detector")?;
    let sentences: Vec<Vec<usize>> = data.test.iter().map(|r| r.tokens.clone()).collect();
    let masked = detect_all(&f, &sentences, cfg)?;
    let saliency = parallel_map(&sentences, cfg.workers, |s| detect::compute_saliency(&f, s, cfg.detect_aggregation));
    let mut dump = String::new();
    for s in saliency {
        dump.push_str(&s?.dump_line(&data.vocab));
        dump.push('\n');
    }
    let records: Vec<MaskedRecord> = masked
        .iter()
        .enumerate()
        .map(|(index, m)| MaskedRecord {
            index,
            original: data.vocab.decode(&m.original).join(" "),
            masked: data.vocab.decode(&m.tokens).join(" "),
            positions: m.positions.clone(),
        })
        .collect();
    write_atomic(&layout.masked(), to_jsonl(&records).as_bytes())?;
    write_atomic(&layout.saliency(), dump.as_bytes())?;
    let n: usize = masked.iter().map(|m| m.positions.len()).sum();
    Ok(format!("sentences={} masked_tokens={n}", masked.len()))
}

fn encode_text(vocab: &Vocabulary, text: &str) -> Vec<usize> {
    vocab.encode(&text.split_whitespace().collect::<Vec<_>>())
}

fn load_masked(layout: &Layout, data: &Data) -> Result<Vec<MaskedSentence>, PipelineError> {
    let records: Vec<MaskedRecord> = read_jsonl(&layout.masked())?;
    if records.len() != data.test.len() {
        return Err(PipelineError::Malformed {
            path: layout.masked(),
            reason: format!("{} records for {} test sentences", records.len(), data.test.len()),
        });
    }
    Ok(records
        .into_iter()
        .zip(&data.test)
        .map(|(r, row)| MaskedSentence { original: row.tokens.clone(), tokens: encode_text(&data.vocab, &r.masked), positions: r.positions })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteRecord {
    pub index: usize,
    pub method: String,
    pub original: String,
    /// Encoder input: the masked sentence for detect-based methods, else the original.
    pub input: String,
    pub rewritten: String,
    pub attribute_distribution: Option<Vec<f64>>,
    pub neutral_loss: Option<f64>,
    pub retried: bool,
    pub non_finite: bool,
}

/// Order-preserving map over `items` split into `workers` contiguous chunks.
pub fn parallel_map<T: Sync, U: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    if workers <= 1 || items.len() < 2 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<U>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

fn rule_set(cfg: &RunConfig) -> Result<RuleSet, PipelineError> {
    if let Some(r) = RuleSet::builtin(&cfg.rules) {
        return Ok(r);
    }
    let path = PathBuf::from(&cfg.rules);
    RuleSet::parse(&read_text(&path)?).map_err(|e| PipelineError::Config { key: "rules".into(), reason: e.to_string() })
}

/// Rewrites the test split with one method.
pub fn rewrite(cfg: &RunConfig, layout: &Layout, method: Method) -> Result<String, PipelineError> {
    let data = Data::load(layout)?;
    let vocab = &data.vocab;
    let text = |ids: &[usize]| vocab.decode(ids).join(" ");
    let n = data.test.len();
    let max_len = cfg.decode_max_len;
    let plain = |index: usize, input: &[usize], out: Vec<usize>| RewriteRecord {
        index,
        method: method.to_string(),
        original: text(&data.test[index].tokens),
        input: text(input),
        rewritten: text(&out),
        attribute_distribution: None,
        neutral_loss: None,
        retried: false,
        non_finite: false,
    };
    let indices: Vec<usize> = (0..n).collect();
    let records: Vec<RewriteRecord> = match method {
        Method::Depen | Method::Pen => {
            let g = load_seq2seq(layout, "seq2seq")?;
            let head = AttributeHead::from_checkpoint(&load_checkpoint(layout, "head")?)?;
            let f = load_classifier(layout, "detector")?;
            let inputs: Vec<Vec<usize>> = if method == Method::Depen {
                load_masked(layout, &data)?.into_iter().map(|m| m.tokens).collect()
            } else {
                data.test.iter().map(|r| r.tokens.clone()).collect()
            };
            let results = parallel_map(&indices, cfg.workers, |&i| -> Result<RewriteRecord, DecodeError> {
                let r = if method == Method::Depen {
                    decode::depen_rewrite(&f, &g, &head, &inputs[i], &cfg.perturb, max_len)?
                } else {
                    baselines::pen_rewrite(&f, &g, &head, &inputs[i], &cfg.perturb, max_len)?
                };
                Ok(RewriteRecord {
                    attribute_distribution: Some(r.attribute_distribution.clone()),
                    neutral_loss: Some(r.neutral_loss),
                    retried: r.retried,
                    non_finite: r.non_finite,
                    ..plain(i, &inputs[i], r.tokens)
                })
            });
            results.into_iter().collect::<Result<_, _>>()?
        }
        Method::Den => {
            let g = load_seq2seq(layout, "seq2seq")?;
            let masked = load_masked(layout, &data)?;
            let results = parallel_map(&indices, cfg.workers, |&i| {
                g.greedy_decode(&masked[i].tokens, max_len).map(|out| plain(i, &masked[i].tokens, out))
            });
            results.into_iter().collect::<Result<_, _>>()?
        }
        Method::Wd => {
            let g = load_seq2seq(layout, "seq2seq")?;
            let flagged: BTreeSet<usize> = baselines::flagged_types(&load_masked(layout, &data)?);
            let results = parallel_map(&indices, cfg.workers, |&i| {
                let src = &data.test[i].tokens;
                baselines::weighted_decode(&g, src, &flagged, cfg.wd_alpha, max_len).map(|out| plain(i, src, out))
            });
            results.into_iter().collect::<Result<_, _>>()?
        }
        Method::Adv => {
            let adv = load_seq2seq(layout, "adv")?;
            let results = parallel_map(&indices, cfg.workers, |&i| {
                let src = &data.test[i].tokens;
                baselines::adv_rewrite(&adv, src, max_len).map(|out| plain(i, src, out))
            });
            results.into_iter().collect::<Result<_, _>>()?
        }
        Method::Rb => {
            let rules = rule_set(cfg)?;
            indices
                .iter()
                .map(|&i| {
                    let original = vocab.decode(&data.test[i].tokens);
                    let out = baselines::rule_rewrite(&rules, &original);
                    RewriteRecord { rewritten: out.join(" "), ..plain(i, &data.test[i].tokens, vec![]) }
                })
                .collect()
        }
    };
    let non_finite = records.iter().filter(|r| r.non_finite).count();
    let retried = records.iter().filter(|r| r.retried).count();
    let empty = records.iter().filter(|r| r.rewritten.is_empty()).count();
    write_atomic(&layout.rewrites(method), to_jsonl(&records).as_bytes())?;
    Ok(format!("method={method} sentences={n} empty={empty} retried={retried} non_finite={non_finite}"))
}

/// Scores every method whose rewrites exist and writes the report files.
pub fn evaluate(cfg: &RunConfig, layout: &Layout) -> Result<EvalReport, PipelineError> {
    let data = Data::load(layout)?;
    let mut outputs = Vec::new();
    for m in Method::ALL {
        let path = layout.rewrites(m);
        if !path.exists() {
            continue;
        }
        let records: Vec<RewriteRecord> = read_jsonl(&path)?;
        if records.len() != data.test.len() {
            return Err(PipelineError::Malformed { path, reason: "rewrite count differs from the test split".into() });
        }
        let rewrites = records.iter().map(|r| encode_text(&data.vocab, &r.rewritten)).collect();
        outputs.push(MethodOutputs { method: m.to_string(), rewrites });
    }
    if outputs.is_empty() {
        return Err(EvalError::MissingMethodOutputs("any".into()).into());
    }
    let mut checksums = BTreeMap::new();
    for name in ["detector", "f_eval", "o_eval", "mlm", "seq2seq", "head", "adv"] {
        let path = layout.model(name);
        if path.exists() {
            checksums.insert(name.to_string(), checkpoint_checksum(&read_bytes(&path)?));
        }
    }
    let f_eval = load_classifier(layout, "f_eval")?;
    let o_eval = load_classifier(layout, "o_eval")?;
    let mlm = MaskedLm::from_checkpoint(&load_checkpoint(layout, "mlm")?)?;
    let scorers = Scorers { f_eval: &f_eval, o_eval: &o_eval, mlm: &mlm };
    let mut echo = cfg.entries();
    echo.remove("out");
    echo.remove("workers");
    let report = eval::evaluate_system(&outputs, &data.test_set(), &scorers, &data.corpus_id, checksums, echo)?;
    write_atomic(&layout.report(), report.to_jsonl().as_bytes())?;
    write_atomic(&layout.table(), report.table().as_bytes())?;
    Ok(report)
}

pub fn load_report(layout: &Layout) -> Result<EvalReport, PipelineError> {
    let path = layout.report();
    EvalReport::from_jsonl(&read_text(&path)?).map_err(|e| PipelineError::Malformed { path, reason: e.to_string() })
}

/// Runs one command and returns a one-line summary (the table, for evaluate and report).
pub fn run(command: Command, cfg: &RunConfig) -> Result<String, PipelineError> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out);
    let t0 = Instant::now();
    let summary = match command {
        Command::GenCorpus => gen_corpus(cfg, &layout)?,
        Command::TrainClassifier => train_classifiers(cfg, &layout)?,
        Command::TrainSeq2Seq => train_generators(cfg, &layout)?,
        Command::TrainHeads => train_heads(cfg, &layout)?,
        Command::Detect => detect_test(cfg, &layout)?,
        Command::Rewrite(m) => rewrite(cfg, &layout, m)?,
        Command::Evaluate => evaluate(cfg, &layout)?.table(),
        Command::Report => load_report(&layout)?.table(),
    };
    log::info!("command={command:?} elapsed_s={:.2}", t0.elapsed().as_secs_f64());
    Ok(summary)
}
