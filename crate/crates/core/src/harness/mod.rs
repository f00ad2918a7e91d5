//! Two-stage training, evaluation, ablations, separation analysis and persistence.

mod ablation;
pub mod checkpoint;
mod config;
mod eval;
mod model;
mod optim;
mod separation;
mod train;

pub use ablation::{
    ablation_csv, iteration_effect, run_ablation_suite, variants, AblationRow, CSV_HEADER,
};
pub use config::{
    Ablation, DataSection, EvalSection, MetaSource, RoutingSection, RoutingSettings, Stage1Config,
    Stage2Config, TrainConfig,
};
pub use eval::{eval_hash, evaluate, evaluate_with, EvalOptions, EvalReport, THREADS_ENV};
pub use model::{EpisodeScores, Model, NamedGradients, Progress};
pub use optim::Adam;
pub use separation::{separation_report, silhouette, SeparationOptions, SeparationReport};
pub use train::{
    base_accuracy, make_splits, meta_episode_config, meta_step, meta_train, pretrain,
    pretrain_model, train_end_to_end, MetaTrainReport, PretrainReport, Splits, TrainedModel,
};
