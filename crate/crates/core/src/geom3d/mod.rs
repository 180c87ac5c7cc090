//! Volumes, rigid transforms, resampling and evaluation metrics.
//!
//! All coordinates are voxel indices `(x, y, z)`. Spacing is carried through
//! I/O but transforms operate in voxel units.

pub mod io;
mod metrics;
pub mod transform;
mod volume;
mod warp;

use thiserror::Error;

pub use metrics::{dice, rotation_error_deg, translation_error_vox, RotationError};
pub use transform::{
    axis_angle, cube_rotations, euler_zyx_from_matrix, euler_zyx_matrix, nearest_rotation, rot_x,
    rot_y, rot_z, rotation_angle_deg, EulerZyx, EulerZyxInput, RigidTransform, TransformFile,
};
pub use volume::{gaussian_kernel_1d, grid_center, Volume3};
pub use warp::{sample_nearest, sample_trilinear, warp, Interp};

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("volume dims must all be >= 1, got {0:?}")]
    EmptyDims([usize; 3]),
    #[error("voxel buffer has {got} values, dims require {expected}")]
    DataLength { expected: usize, got: usize },
    #[error("voxel spacing must be positive and finite, got {0:?}")]
    BadSpacing([f32; 3]),
    #[error("non-finite voxel value at index {0}")]
    NonFinite(usize),
    #[error("volume dims differ: {0:?} vs {1:?}")]
    DimsMismatch([usize; 3], [usize; 3]),
    #[error("matrix is not a proper rotation (drift {0:e})")]
    NotARotation(f64),
    #[error("transform has non-finite translation or center")]
    NonFiniteTransform,
    #[error("not a VOL1 file (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
