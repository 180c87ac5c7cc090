//! The intensity denoiser placed in front of the feature extractor, its
//! training loop, and optional fitting of the extractor's coefficients.

mod phi;
mod train;
mod unet;

use thiserror::Error;

pub use phi::{
    fit_coefficients, geodesic_loss, loss_geodesic, loss_phi, FitConfig, FitReport, PhiObjective,
    ViewPair,
};
pub use train::{
    augmented_example, heldout_mse, heldout_set, load_denoiser, train_denoiser, CheckpointHeader,
    TrainConfig, TrainReport, TrainState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, CHECKPOINT_MAGIC,
};
pub use unet::{denoiser_forward, loss_psi, DenoiserConfig, DenoiserNet, Tape};

use crate::closedform::ClosedFormError;
use crate::corrupt::CorruptError;
use crate::geom3d::GeomError;
use crate::harness::HarnessError;
use crate::steerable::SteerError;

#[derive(Debug, Error)]
pub enum DenoiseError {
    #[error("invalid denoiser config: {0}")]
    BadConfig(&'static str),
    #[error("input dims {dims:?} must be positive multiples of {divisor}")]
    Dims { dims: [usize; 3], divisor: usize },
    #[error("expected {expected} parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("loss became non-finite at step {step}")]
    Diverged { step: u64 },
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("not a checkpoint file (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Corrupt(#[from] CorruptError),
    #[error(transparent)]
    ClosedForm(#[from] ClosedFormError),
    #[error(transparent)]
    Steer(#[from] SteerError),
    #[error(transparent)]
    Harness(Box<HarnessError>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl From<HarnessError> for DenoiseError {
    fn from(e: HarnessError) -> Self {
        Self::Harness(Box::new(e))
    }
}
