//! Configuration, training, evaluation and the command implementations.

pub mod commands;
pub mod config;
pub mod metrics;
pub mod train;

pub use commands::{
    cmd_ablate, cmd_eval, cmd_explain, cmd_gradcheck, cmd_train, load_model, AblationReport, GradcheckOptions,
    GradcheckSummary, TrainReport,
};
pub use config::{RunConfig, TrainSettings};
pub use metrics::{evaluate, MetricsReport};
pub use train::{batch_loss, train, History, TrainOutcome};
