//! Detect-and-perturb text neutralisation on tiny transformers.
//!
//! Stages: [`detect`] masks attribute-salient tokens, [`decode`] regenerates under a
//! neutralisation constraint, [`eval`] scores rewrites, [`pipeline`] wires it into commands.

pub mod autodiff;
pub mod corpus;
pub mod models;
pub mod detect;
pub mod decode;
pub mod baselines;
pub mod eval;
pub mod pipeline;

pub use autodiff::{Graph, Tensor, Var};
pub use corpus::{Corpus, Schema, Vocabulary};
pub use decode::{PerturbConfig, RewriteResult};
pub use detect::{Aggregation, MaskedSentence, SaliencyMap};
pub use eval::{EvalReport, ReportRow};
pub use models::{AttributeHead, EncoderClassifier, MaskedLm, Seq2Seq};
pub use pipeline::{RunConfig, Command, Method, PipelineError};
