//! Small-scale experimental substrate: a synthetic biased-data generator, a tiny
//! classifier with a deterministic trainer, evaluation, logit ensembling and a
//! diagonal Fisher estimator.

mod eval;
mod model;
mod synth;
mod train;

pub use eval::{ensemble_evaluate, estimate_fisher, evaluate, EvalReport, DEFAULT_FISHER_SAMPLES};
pub use model::{Dataset, Layout, TinyModel};
pub use synth::{generate_biased_dataset, BiasSpec};
pub use train::{pilot_study, train_submodel, Optimizer, PilotConfig, TrainConfig, Trainer};

use thiserror::Error;

use crate::dispersal::DispersalError;
use crate::tensor_store::StoreError;

#[derive(Error, Debug)]
pub enum BiasLabError {
    #[error("{0}")]
    Invalid(String),
    #[error("record `{0}` has no features")]
    MissingFeatures(String),
    #[error("record `{0}` has no label")]
    Unlabeled(String),
    #[error("record `{id}` has {got} features, model expects {expected}")]
    DimensionMismatch { id: String, got: usize, expected: usize },
    #[error("record `{id}` has label {label}, model has {classes} classes")]
    LabelOutOfRange { id: String, label: usize, classes: usize },
    #[error("models differ in layout: {0}")]
    LayoutMismatch(String),
    #[error("sample is empty")]
    EmptySample,
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Dispersal(#[from] DispersalError),
}

pub type Result<T> = std::result::Result<T, BiasLabError>;
