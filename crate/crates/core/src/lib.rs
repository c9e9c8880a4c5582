//! Click-through-rate prediction with the Deep Interest Network.
//!
//! The crate covers the whole offline loop: a synthetic ad-log generator
//! with known click probabilities, vocabulary encoding, the attention
//! model and its uniform-pooling baseline with hand-written gradients,
//! Adam training with L2, and AUC / group-weighted AUC evaluation.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod optim;

pub use checkpoint::Checkpoint;
pub use data::{
    build_vocab, encode, generate_synthetic, load_jsonl, save_jsonl, split, EncodedBatch, GroundTruth,
    ImpressionRecord, SplitMode, SyntheticConfig, Vocabulary,
};
pub use error::{Error, Result};
pub use metrics::{accuracy, auc, ctr, ecpm, gauc, rank_ads, AdCandidate, EvalReport, WeightMode};
pub use model::{DinModel, ModelConfig};
pub use numerics::{Matrix, SeededRng};
pub use optim::{bce_loss, log_loss, train, TrainConfig, TrainHistory, TrainOutcome};
