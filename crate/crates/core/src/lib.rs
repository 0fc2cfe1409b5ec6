//! Product-quantization codebooks learned jointly with a compact feature
//! extractor through a cross-quantized contrastive objective, plus packed
//! code indexes, lookup-table search and retrieval evaluation.

pub mod augment;
pub mod config;
pub mod cqc_loss;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod index;
pub mod numerics;
pub mod optim;
mod parallel;
pub mod pq_head;
pub mod trainer;

pub use augment::{AugmentConfig, Image};
pub use config::{DatasetKind, RunConfig};
pub use cqc_loss::{CqcConfig, CrossSimMatrix};
pub use encoder::Encoder;
pub use error::{Error, Result};
pub use eval::{MetricReport, RelevanceOracle};
pub use index::{Hit, IndexFile, LookupTable};
pub use numerics::{Rng, Tensor};
pub use optim::AdamState;
pub use pq_head::{CodeMatrix, CodebookSet};
pub use trainer::{Ablation, Checkpoint, LossRecord, Mode, TrainConfig, TrainState, TrainingData};
