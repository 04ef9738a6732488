use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use crate::decode::PerturbConfig;
use crate::detect::{Aggregation, HeadAggregation, LayerSpan};
use crate::models::{AdvConfig, EncoderConfig, Seq2SeqConfig, TrainConfig};

use super::PipelineError;

/// Every knob of a run. Text form is one `dotted.key = value` per line; `#` starts a comment.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub workers: usize,

    pub corpus_train_docs: usize,
    pub corpus_valid_docs: usize,
    pub corpus_test_docs: usize,
    pub corpus_p_leak: f64,
    pub corpus_context_tilt: f64,

    pub model_d_model: usize,
    pub model_layers: usize,
    pub model_heads: usize,
    pub model_ff_dim: usize,
    pub model_max_len: usize,
    pub model_dropout: f64,

    pub train_lr: f64,
    pub train_seq2seq_lr: f64,
    pub train_mlm_lr: f64,
    pub train_adv_lr: f64,
    pub train_classifier_batch: usize,
    pub train_seq2seq_batch: usize,
    pub train_classifier_epochs: usize,
    pub train_seq2seq_epochs: usize,
    pub train_head_epochs: usize,
    pub train_head_lr: f64,
    pub train_patience: usize,
    pub train_weight_decay: f64,
    pub train_grad_clip: f64,
    pub train_mask_fraction: f64,

    pub detect_k: f64,
    pub detect_aggregation: Aggregation,

    pub perturb: PerturbConfig,
    pub adv: AdvConfig,
    pub wd_alpha: f64,
    pub decode_max_len: usize,
    pub rules: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("run"),
            workers: 1,
            corpus_train_docs: 2000,
            corpus_valid_docs: 100,
            corpus_test_docs: 500,
            corpus_p_leak: 0.9,
            corpus_context_tilt: 0.0,
            model_d_model: 64,
            model_layers: 2,
            model_heads: 4,
            model_ff_dim: 128,
            model_max_len: 64,
            model_dropout: 0.1,
            train_lr: 1e-4,
            train_seq2seq_lr: 1e-4,
            train_mlm_lr: 1e-4,
            train_adv_lr: 1e-4,
            train_classifier_batch: 64,
            train_seq2seq_batch: 8,
            train_classifier_epochs: 20,
            train_seq2seq_epochs: 20,
            train_head_epochs: 20,
            train_head_lr: 1e-2,
            train_patience: 3,
            train_weight_decay: 0.01,
            train_grad_clip: 1.0,
            train_mask_fraction: 0.2,
            detect_k: 20.0,
            detect_aggregation: Aggregation::default(),
            perturb: PerturbConfig::default(),
            adv: AdvConfig::default(),
            wd_alpha: 0.2,
            decode_max_len: 40,
            rules: "gender".into(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, PipelineError> {
    value.parse().map_err(|_| PipelineError::Config { key: key.to_string(), reason: format!("cannot parse {value:?}") })
}

macro_rules! fields {
    ($($key:literal => $($field:ident).+),* $(,)?) => {
        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            /// Sets one dotted key from its text value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), PipelineError> {
                let value = value.trim();
                match key {
                    $($key => self.$($field).+ = parse(key, value)?,)*
                    "out" => self.out = PathBuf::from(value),
                    "detect.heads" => {
                        self.detect_aggregation.heads = match value {
                            "mean" => HeadAggregation::Mean,
                            "max" => HeadAggregation::Max,
                            _ => return Err(PipelineError::Config { key: key.into(), reason: "expected mean or max".into() }),
                        }
                    }
                    "detect.layers" => {
                        self.detect_aggregation.layers = match value {
                            "all" => LayerSpan::All,
                            "last" => LayerSpan::Last,
                            _ => return Err(PipelineError::Config { key: key.into(), reason: "expected all or last".into() }),
                        }
                    }
                    "rules" => self.rules = value.to_string(),
                    _ => return Err(PipelineError::Config { key: key.into(), reason: "unknown key".into() }),
                }
                Ok(())
            }

            /// Canonical key/value listing, also used as the config echo in reports.
            pub fn entries(&self) -> BTreeMap<String, String> {
                let mut m = BTreeMap::new();
                $(m.insert($key.to_string(), self.$($field).+.to_string());)*
                m.insert("out".into(), self.out.display().to_string());
                let heads = match self.detect_aggregation.heads { HeadAggregation::Mean => "mean", HeadAggregation::Max => "max" };
                let layers = match self.detect_aggregation.layers { LayerSpan::All => "all", LayerSpan::Last => "last" };
                m.insert("detect.heads".into(), heads.into());
                m.insert("detect.layers".into(), layers.into());
                m.insert("rules".into(), self.rules.clone());
                m
            }
        }
    };
}

fields! {
    "seed" => seed,
    "workers" => workers,
    "corpus.train_docs" => corpus_train_docs,
    "corpus.valid_docs" => corpus_valid_docs,
    "corpus.test_docs" => corpus_test_docs,
    "corpus.p_leak" => corpus_p_leak,
    "corpus.context_tilt" => corpus_context_tilt,
    "model.d_model" => model_d_model,
    "model.layers" => model_layers,
    "model.heads" => model_heads,
    "model.ff_dim" => model_ff_dim,
    "model.max_len" => model_max_len,
    "model.dropout" => model_dropout,
    "train.lr" => train_lr,
    "train.seq2seq_lr" => train_seq2seq_lr,
    "train.mlm_lr" => train_mlm_lr,
    "train.adv_lr" => train_adv_lr,
    "train.classifier_batch" => train_classifier_batch,
    "train.seq2seq_batch" => train_seq2seq_batch,
    "train.classifier_epochs" => train_classifier_epochs,
    "train.seq2seq_epochs" => train_seq2seq_epochs,
    "train.head_epochs" => train_head_epochs,
    "train.head_lr" => train_head_lr,
    "train.patience" => train_patience,
    "train.weight_decay" => train_weight_decay,
    "train.grad_clip" => train_grad_clip,
    "train.mask_fraction" => train_mask_fraction,
    "detect.k" => detect_k,
    "perturb.step_size" => perturb.step_size,
    "perturb.iters_per_step" => perturb.iters_per_step,
    "perturb.accumulation_passes" => perturb.accumulation_passes,
    "perturb.fusion_weight" => perturb.fusion_weight,
    "perturb.kl_anchor" => perturb.kl_anchor,
    "perturb.grad_clip" => perturb.grad_clip,
    "perturb.retry_threshold" => perturb.retry_threshold,
    "perturb.update_history" => perturb.update_history,
    "adv.lambda_rev" => adv.lambda_rev,
    "adv.reconstruction_weight" => adv.reconstruction_weight,
    "adv.adversary_weight" => adv.adversary_weight,
    "wd.alpha" => wd_alpha,
    "decode.max_len" => decode_max_len,
}

impl RunConfig {
    pub fn parse_text(text: &str) -> Result<Self, PipelineError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), PipelineError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| PipelineError::Config {
                key: format!("line {}", i + 1),
                reason: "expected `key = value`".into(),
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |key: &str, reason: &str| Err(PipelineError::Config { key: key.into(), reason: reason.into() });
        if self.corpus_train_docs == 0 || self.corpus_valid_docs == 0 || self.corpus_test_docs == 0 {
            return bad("corpus.train_docs", "every split needs at least one document");
        }
        if !(0.0..=1.0).contains(&self.corpus_p_leak) {
            return bad("corpus.p_leak", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.corpus_context_tilt) {
            return bad("corpus.context_tilt", "must lie in [0, 1]");
        }
        if !(self.detect_k > 0.0 && self.detect_k <= 100.0) {
            return bad("detect.k", "must lie in (0, 100]");
        }
        if !(self.wd_alpha > 0.0 && self.wd_alpha <= 1.0) {
            return bad("wd.alpha", "must lie in (0, 1]");
        }
        if self.workers == 0 {
            return bad("workers", "must be positive");
        }
        if self.adv.lambda_rev < 0.0 {
            return bad("adv.lambda_rev", "must be non-negative");
        }
        self.perturb.validate().map_err(|e| PipelineError::Config { key: "perturb".into(), reason: e.to_string() })?;
        self.encoder_config(10).validate().map_err(|e| PipelineError::Config { key: "model".into(), reason: e.to_string() })?;
        Ok(())
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            d_model: self.model_d_model,
            num_layers: self.model_layers,
            num_heads: self.model_heads,
            ff_dim: self.model_ff_dim,
            max_len: self.model_max_len,
            dropout: self.model_dropout,
        }
    }

    pub fn seq2seq_config(&self, vocab_size: usize) -> Seq2SeqConfig {
        Seq2SeqConfig {
            vocab_size,
            d_model: self.model_d_model,
            encoder_layers: self.model_layers,
            decoder_layers: self.model_layers,
            num_heads: self.model_heads,
            ff_dim: self.model_ff_dim,
            max_len: self.model_max_len,
            dropout: self.model_dropout,
        }
    }

    fn train_config(&self, lr: f64, batch: usize, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            batch_size: batch,
            max_epochs: epochs,
            patience: self.train_patience,
            weight_decay: self.train_weight_decay,
            grad_clip: self.train_grad_clip,
            seed,
        }
    }

    pub fn classifier_training(&self, seed: u64) -> TrainConfig {
        self.train_config(self.train_lr, self.train_classifier_batch, self.train_classifier_epochs, seed)
    }

    pub fn seq2seq_training(&self, seed: u64) -> TrainConfig {
        self.train_config(self.train_seq2seq_lr, self.train_seq2seq_batch, self.train_seq2seq_epochs, seed)
    }

    pub fn adv_training(&self, seed: u64) -> TrainConfig {
        self.train_config(self.train_adv_lr, self.train_seq2seq_batch, self.train_seq2seq_epochs, seed)
    }

    pub fn mlm_training(&self, seed: u64) -> TrainConfig {
        self.train_config(self.train_mlm_lr, self.train_classifier_batch, self.train_classifier_epochs, seed)
    }

    pub fn head_training(&self, seed: u64) -> TrainConfig {
        self.train_config(self.train_head_lr, self.train_classifier_batch, self.train_head_epochs, seed)
    }
}
