//! Experiment orchestration behind the CLI: dataset generation, training,
//! decoding, evaluation, the ablation matrix and the ROI probe.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod io;

use std::path::PathBuf;

use thiserror::Error;

use crate::diffusion::DiffusionError;
use crate::encoding::BrainError;
use crate::pipeline::PipelineError;
use crate::ridge::RidgeError;
use crate::tensor::TensorError;

pub use commands::{
    cmd_ablate, cmd_decode, cmd_evaluate, cmd_gen_data, cmd_roi_probe, cmd_train, AblationRow,
    RoiProbeRow,
};
pub use config::ExperimentConfig;
pub use dataset::{Dataset, Item};
pub use io::RunManifest;

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("missing artifact {}; run the earlier stage first", .0.display())]
    MissingArtifact(PathBuf),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config { .. } => EXIT_CONFIG,
            HarnessError::MissingArtifact(_) => EXIT_MISSING,
            HarnessError::Numerical(_) => EXIT_NUMERICAL,
            HarnessError::Invalid(_) | HarnessError::Io { .. } => EXIT_OTHER,
        }
    }
}

impl From<PipelineError> for HarnessError {
    fn from(e: PipelineError) -> Self {
        match &e {
            PipelineError::Ridge(RidgeError::SvdFailed)
            | PipelineError::Diffusion(DiffusionError::Diverged { .. })
            | PipelineError::Diffusion(DiffusionError::Tensor(TensorError::NonFinite { .. })) => {
                HarnessError::Numerical(e.to_string())
            }
            _ => HarnessError::Invalid(e.to_string()),
        }
    }
}

impl From<BrainError> for HarnessError {
    fn from(e: BrainError) -> Self {
        match e {
            BrainError::RankDeficient(_) => HarnessError::Numerical(e.to_string()),
            _ => HarnessError::Invalid(e.to_string()),
        }
    }
}

impl From<RidgeError> for HarnessError {
    fn from(e: RidgeError) -> Self {
        PipelineError::from(e).into()
    }
}

impl From<DiffusionError> for HarnessError {
    fn from(e: DiffusionError) -> Self {
        PipelineError::from(e).into()
    }
}

impl From<crate::world::codec::CodecError> for HarnessError {
    fn from(e: crate::world::codec::CodecError) -> Self {
        PipelineError::from(e).into()
    }
}
