//! Tiny transformer models: the attribute classifier, the denoising encoder-decoder,
//! the decode-time attribute head and the masked-token scorer.

pub mod checkpoint;
mod classifier;
mod config;
mod layers;
mod seq2seq;
mod train;

pub use checkpoint::Checkpoint;
pub use classifier::{frame_for_encoder, ClassifierOutput, EncoderClassifier, MaskedLm};
pub use config::{EncoderClassifierConfig, EncoderConfig, Seq2SeqConfig};
pub use seq2seq::{is_blocked, next_token_distribution, AttributeHead, EncodedSource, Seq2Seq};
pub use train::{
    accuracy, adv_train, fit_head, random_mask, reconstruction_loss, train_attribute_head, train_classifier,
    train_mlm, train_probe, train_seq2seq, AdvConfig, EpochRecord, History, LabeledExample, PairExample,
    TrainConfig,
};

use thiserror::Error;

use crate::autodiff::AutodiffError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("training data contains a single class")]
    SingleClass,
    #[error("training diverged: non-finite loss in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("no training examples")]
    EmptyInput,
    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptPayload(String),
    #[error("checkpoint holds a {found} model, expected {expected}")]
    WrongKind { expected: String, found: String },
}

impl ModelError {
    /// True when the failure comes from a non-finite value.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Self::Diverged { .. } | Self::Autodiff(AutodiffError::NonFinite { .. }))
    }
}
