//! Rotation-steerable 3D convolutions built from spherical-harmonic kernel
//! bases, gated nonlinearities and the feature-extractor network.

mod basis;
mod ecnn;
mod field;
mod layer;

use thiserror::Error;

pub use basis::{steerability_check, steerability_check_combination, BasisParams, SteerableBasis};
pub use ecnn::{ecnn_forward, Ecnn, EcnnConfig, ModelHeader, MODEL_MAGIC};
pub use field::FieldType;
pub use layer::{econv_forward, equivariant_nonlinearity, BasisSet, EquivariantLayer, GATE_EPS};

use crate::so3rep::So3Error;

/// Highest subfield order a network may carry; kernels between two such
/// fields need harmonics up to twice this.
pub const MAX_FIELD_ORDER: usize = 2;

#[derive(Debug, Error)]
pub enum SteerError {
    #[error("field type has no subfields")]
    EmptyField,
    #[error("field order {0} exceeds {MAX_FIELD_ORDER}")]
    FieldOrderTooHigh(usize),
    #[error("invalid basis parameters: {0}")]
    BadBasis(&'static str),
    #[error("invalid network config: {0}")]
    BadConfig(&'static str),
    #[error("expected {expected} channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("expected {expected} gate biases, got {got}")]
    GateBiasCount { expected: usize, got: usize },
    #[error("expected {expected} parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("not a model file (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error(transparent)]
    So3(#[from] So3Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
