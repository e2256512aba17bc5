//! Training and inference loops: self-supervised pretraining, supervised
//! fine-tuning with best-checkpoint selection, sliding-window inference and
//! Monte Carlo dropout uncertainty.

pub mod finetune;
pub mod loss;
pub mod optimizer;
pub mod pretext;
pub mod pretrain;
pub mod sliding;
pub mod uncertainty;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("numeric abort at iteration {iteration}: {message}")]
    Numeric { message: String, iteration: u64 },
    #[error(transparent)]
    Core(#[from] volseg_core::Error),
    #[error(transparent)]
    Model(#[from] volseg_model::ModelError),
    #[error(transparent)]
    Metrics(#[from] volseg_metrics::MetricsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

pub use finetune::{build_initial_state, finetune, FinetuneRun, InitMode, TrainConfig, TrainLog};
pub use loss::{seg_loss, seg_loss_graph, LossWeights};
pub use optimizer::{AdamW, OptimizerConfig};
pub use pretext::{info_nce, make_pretext_batch, PretextBatch, PretextConfig, PretextView};
pub use pretrain::{pretrain, PretrainConfig, PretrainLog, PretrainRun};
pub use sliding::{sliding_window_predict, ProbGrid};
pub use uncertainty::{export_uncertainty, mc_predict, vote, PredictionStack, UncertaintyMap};
