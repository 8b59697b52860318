//! Attention-driven weight pruning for small convolutional and dense networks.
//!
//! Each prunable layer carries a scalar attention `a_l` that sets its pruning
//! ratio, magnitude pruning picks the surviving weights, and a square
//! sparsity regularizer pushes attentions down during training. Trained
//! models fold attentions into their weights and export to a compact sparse
//! format.

pub mod arch;
pub mod data;
pub mod error;
pub mod model;
pub mod ops;
pub mod optim;
pub mod pruning;
pub mod store;
pub mod tape;
pub mod tensor;
pub mod train;

pub use arch::{Architecture, LayerKind, LayerShape, StageSpec};
pub use data::{Batch, Dataset, Split};
pub use error::{Error, Result};
pub use model::{AttentionLayer, Model};
pub use optim::{Optimizer, OptimizerKind};
pub use pruning::{magnitude_mask, model_sparsity, pruning_ratio, sparsity_regularizer};
pub use store::{export_sparse, import_sparse, load_checkpoint, report_compression, save_checkpoint, SparseModel};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};
pub use train::{EpochMetrics, IterationMetrics, TrainConfig, TrainHistory, Trainer};
