//! Training, evaluation and experiment drivers.

mod compare;
mod config;
mod embed;
mod finetune;
mod silhouette;
mod train;

pub use compare::{aggregate, compare, model_seed, run_cell, train_seed, Aggregate, Cell, ResultRow, RunReport, SeedDiagnostics};
pub use config::{ModelTemplate, RunConfig};
pub use embed::{embed, export_embeddings, Embeddings, SilhouetteDiagnostics, EMBEDDING_PATHS};
pub use finetune::{finetune_new_subject, held_out_workflow, param_digest, HeldOutReport};
pub use silhouette::silhouette;
pub use train::{
    evaluate, linear_probe_accuracy, predict_dataset, score, train, train_model, Evaluation, LinearProbe,
    LossHistory, Score, TrainConfig, Trainable,
};
