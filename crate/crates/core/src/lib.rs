//! Sparse multi-view Bayesian factor analysis with mean-field variational
//! inference, for multi-task longitudinal forecasting with missing data.

pub mod error;
pub mod baselines;
pub mod bench;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod persist;
pub mod predict;
pub mod standardize;
pub mod synth;
pub mod views;
pub mod vi;

pub use error::{Error, Result};
pub use model::{
    gamma_expectations, validate_dataset, Dataset, GammaPosterior, GaussianPosterior, Hyperparameters,
    LearningRate, ModelState, RowCovariance, ViewData, ViewKind, ViewRole, ViewSpec,
};
pub use vi::{fit, FitOptions, FitReport, HaltReason};
