//! Phantoms, simulated view pairs, end-to-end tracking, sweeps, reports and
//! run manifests.

mod experiment;
mod manifest;
mod phantom;
mod pipeline;
mod report;
mod verify;

use thiserror::Error;

pub use experiment::{
    run_tracking, run_tracking_with, sensitivity_sweep, sensitivity_sweep_with, write_sweep_csv,
    ExperimentConfig, PhantomTemplate, SweepBaseline, SweepConfig, SweepFactor, SweepLevel,
};
pub use manifest::{
    execute_sweep, execute_track, replay, sha256_bytes, sha256_file, FileDigest, Manifest, Models,
    ReplayCheck, MANIFEST_FILE,
};
pub use phantom::{
    make_phantom, make_phantom_with, Blob, Phantom, PhantomSpec, PHANTOM_TRIES, TAPER_VOX,
};
pub use pipeline::{
    denoise_view, dilate_mask, score_pair, simulate_pair, track, track_pair, PairConfig, PairScore,
    SimulatedPair, TrackOutput, MASK_DILATION_VOX,
};
pub use report::{evaluate, MeanStd, PairRecord, Summary, TrackingReport};
pub use verify::{
    random_rotation, random_unit, verify_closedform, verify_so3, verify_steerable, VerifyRow,
};

use crate::closedform::ClosedFormError;
use crate::corrupt::CorruptError;
use crate::denoise::DenoiseError;
use crate::geom3d::GeomError;
use crate::steerable::SteerError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    BadConfig(&'static str),
    #[error("no asymmetric phantom found in {tries} tries")]
    PhantomRejected { tries: usize },
    #[error("report has no rows")]
    EmptyReport,
    #[error("input file {0} no longer matches its recorded hash")]
    InputChanged(String),
    #[error("command {0:?} cannot be replayed")]
    NotReplayable(String),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Corrupt(#[from] CorruptError),
    #[error(transparent)]
    ClosedForm(#[from] ClosedFormError),
    #[error(transparent)]
    Steer(#[from] SteerError),
    #[error(transparent)]
    Denoise(Box<DenoiseError>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl From<DenoiseError> for HarnessError {
    fn from(e: DenoiseError) -> Self {
        Self::Denoise(Box::new(e))
    }
}
