//! Latent diffusion: noise schedule, dual-conditioned transformer denoiser,
//! noise-prediction training and the deterministic partial-noising sampler.

pub mod denoiser;
pub mod sample;
pub mod schedule;
pub mod train;

use thiserror::Error;

pub use denoiser::{CrossTrace, Denoiser, DenoiserConfig, MixMode, Sample};
pub use sample::{ddim_sample, ddim_step, timesteps, Pipeline, SamplerConfig};
pub use schedule::{forward_diffuse, make_schedule, Schedule};
pub use train::{train_denoiser, LossHistory, TrainConfig, TrainItem};

use crate::tensor::TensorError;

#[derive(Debug, Error, PartialEq)]
pub enum DiffusionError {
    #[error("invalid schedule: T={steps}, beta {beta_start}..{beta_end}")]
    BadSchedule {
        steps: usize,
        beta_start: f64,
        beta_end: f64,
    },
    #[error("timestep {t} outside 0..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("latent has length {got}, expected {expected}")]
    LatentShape { got: usize, expected: usize },
    #[error("{0} = {1} is out of range")]
    OutOfRange(&'static str, f64),
    #[error("sampling needs an input latent unless strength is 1")]
    MissingInput,
    #[error("training set is empty")]
    EmptyDataset,
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
