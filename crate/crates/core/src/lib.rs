//! Train small transformers on modular addition, reverse-engineer the
//! learned Fourier-multiplication circuit, and track mechanistic progress
//! measures across training.

pub mod ablation;
pub mod analysis;
pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod export;
pub mod fourier;
pub mod model;
pub mod numerics;
pub mod progress;
pub mod training;

pub use error::{Error, Result};
pub use experiment::{AnalysisConfig, AnalysisReport, ExperimentConfig, Report};
pub use model::{Example, ModelConfig, ModelParams};
pub use numerics::{DenseMatrix, RngStream};
pub use training::{TrainConfig, OptimizerState};
