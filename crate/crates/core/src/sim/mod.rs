//! Synthetic detector-plot streams with injected failures, and an
//! end-to-end experiment driver.

mod experiment;
mod generate;
mod schedule;

use std::path::PathBuf;

use thiserror::Error;

pub use experiment::{
    run_experiment, CollectionStats, ExperimentConfig, ExperimentReport, ExperimentRow, ModelConfig, StageSummary,
    StreamConfig, ThresholdRow, TrainingConfig,
};
pub use generate::{generate_stream, read_ground_truth, GroundTruthRow, StreamSpec, GROUND_TRUTH_FILE, NOISE_SIGMA};
pub use schedule::{Effect, FailureEvent, FailureKind, FailureSchedule, Region, Truth};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid failure schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Image(#[from] crate::image::ImageError),
    #[error(transparent)]
    Store(#[from] crate::store::StoreError),
    #[error("training: {0}")]
    Train(#[from] crate::predict::train::TrainError),
    #[error("threshold selection: {0}")]
    Analytics(#[from] crate::analytics::AnalyticsError),
    #[error("feeder: {0}")]
    Feeder(#[from] crate::ingest::FeederError),
    #[error("stage {0} failed to start or stopped early")]
    Stage(&'static str),
    #[error("timed out with {recorded} of {expected} frames recorded")]
    Timeout { recorded: usize, expected: usize },
}

#[cfg(test)]
mod tests;
