//! Automatic essay scoring for ENEM-style essays.
//!
//! The pipeline: load and split a graded corpus ([`corpus`]), encode
//! theme/essay pairs with WordPiece ([`tokenizer`]), score them with a
//! transformer encoder and a five-output regression head ([`model`]), train
//! it with AdamW on an MSE objective ([`training`]), and report QWK and RMSE
//! per competency ([`metrics`]).

pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use corpus::{
    grade_histogram, load_corpus, split_corpus, Corpus, CorpusFormat, EssayRecord, GradeHistogram,
    ScoreVector, Split, SplitSpec, COMPETENCIES, SCORE_GRID,
};
pub use error::{AesError, Result};
pub use metrics::{bin_score, evaluate, qwk, rmse, MetricsReport};
pub use model::{count_params, forward, init_model, scale_weights, ForwardOutput, ModelConfig, Mode};
pub use tensor::{DType, ParamStore, Scalar, Tensor};
pub use tokenizer::{build_vocab, decode, encode_pair, pre_tokenize, wordpiece, TokenizedInput, Vocab};
pub use training::{
    adamw_step, grad_check, train, FdPrecision, GradCheckOptions, GradCheckReport, OptimizerState, TrainConfig,
    TrainHistory,
};
