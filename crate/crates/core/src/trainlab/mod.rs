//! Teacher/student distillation on synthetic Gaussian tasks.
//!
//! These experiments reproduce mechanisms (spectra, decorrelation,
//! equivariance transfer), not benchmark accuracy: the data is random
//! Gaussian input labelled by a random frozen teacher.

mod equivariant;
mod experiments;
mod task;
mod toynet;
mod train;

pub use experiments::{
    experiment_batch_size, experiment_equivariance, experiment_fig2, experiment_fig3, experiment_logsum, median_of,
    ArmRun, BatchSizeConfig, EquivarianceConfig, ExperimentId, ExperimentReport, Fig2Config, Fig3Config, LogsumConfig,
    SeedRuns, EQUIVARIANCE_ARMS, FIG2_ARMS, FIG3_ARMS, MAJORITY, SHRINK_THRESHOLD,
};
pub use task::{Batch, DataStream, SyntheticTask};
pub use toynet::{ToyNet, ToyTrace};
pub use train::{objective, sgd_step, train, train_on, ExperimentSpec, Objective, RunResult, Student};
pub use equivariant::{
    attention_backward, eval_tokens, teacher_equivariance, token_objective, train_tokens, TokenObjective,
    TokenSample, TokenSpec, TokenStudent, TokenTeacher,
};
