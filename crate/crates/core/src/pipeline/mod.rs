//! Three-stage training: clip-classification pre-training, low-fidelity joint
//! training of encoder and head, and head training on frozen full-fidelity
//! features. Baseline modes skip or replace stages.

pub mod config;
pub mod data;
pub mod optim;
pub mod run;
pub mod stages;

pub use config::{ExperimentConfig, PretrainMode, StageHyperparams};
pub use run::{comparison_table, head_train, lofi_train, prepare_run, pretrain_encoder, run_experiment, run_with_dataset, RunSummary};
pub use stages::{stage1_acp, stage2_lofi, stage3_head, train_classifier};
