//! Three-phase experiment orchestration: data preparation, phase runners,
//! run log, audits and reports.

pub mod audit;
pub mod config;
pub mod pipeline;
pub mod report;
pub mod runlog;

use std::path::PathBuf;

use voxmind::audio::AudioError;
use voxmind::dataset::{DatasetError, Violation};
use voxmind::metrics::MetricsError;
use voxmind::nn::train::TrainFailure;
use voxmind::nn::NnError;
use voxmind::persist::PersistError;
use voxmind::transfer::TransferError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
    #[error("run log: {0}")]
    RunLog(String),
    #[error("refusing to run: the manifest fails the leakage audit: {0:?}")]
    LeakageRefusal(Vec<Violation>),
    #[error("phase-2 checkpoint not found at {0}")]
    MissingCheckpoint(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Persist(#[from] PersistError),
    #[error(transparent)]
    Transfer(TransferError),
    #[error(transparent)]
    Train(#[from] TrainFailure),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl From<TransferError> for CliError {
    fn from(e: TransferError) -> Self {
        match e {
            TransferError::LeakageRefusal(v) => CliError::LeakageRefusal(v),
            other => CliError::Transfer(other),
        }
    }
}
