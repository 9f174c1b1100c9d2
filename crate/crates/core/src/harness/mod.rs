//! Training with lowest-validation-loss selection, prediction, confusion
//! metrics, coil-disjoint cross-validation and the augmentation sweep.

mod cv;
mod metrics;
mod report;
mod train;

pub use cv::{
    audit_cv, augmentation_sweep, cross_validate, fit_single, CvConfig, CvReport, Dataset, FoldCounts, FoldReport,
    FoldSeeds, SingleFit, SweepArm, SweepReport,
};
pub use metrics::{average, confusion, metrics, ConfusionMatrix, MetricsReport, Undefined};
pub use report::{metrics_csv, render_sweep_table, render_table, TableRow};
pub use train::{batch_tensor, evaluate, evaluate_loss, predict, train, EpochRecord, History, Prediction, TrainConfig};

use thiserror::Error;

use crate::augment::AugmentError;
use crate::dataio::DataError;
use crate::models::ModelError;
use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{0}")]
    Invalid(String),
    #[error("nothing to evaluate")]
    EmptyEvaluation,
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged { epoch: usize, batch: usize, detail: String },
    #[error("protocol violation: {0}")]
    Protocol(String),
}
