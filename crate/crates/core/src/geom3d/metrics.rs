//! Tracking error metrics.
//!
//! Rotation error is the mean absolute per-axis angle of the residual rotation
//! `R_est · R_trueᵀ`, decomposed with the intrinsic Z-Y-X convention. Translation
//! error compares where both transforms send the shared pivot (the grid center in
//! every experiment), i.e. the translation of each map in pivot-centred
//! coordinates. Measured at the pivot, a rotation error does not leak into the
//! translation error.

use serde::{Deserialize, Serialize};

use super::transform::euler_zyx_from_matrix;
use super::{GeomError, RigidTransform, Volume3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationError {
    /// Mean of the absolute per-axis residual angles.
    pub mean_deg: f64,
    /// Residual angles about x, y, z.
    pub per_axis_deg: [f64; 3],
    pub gimbal_lock: bool,
}

pub fn rotation_error_deg(truth: &RigidTransform, estimate: &RigidTransform) -> RotationError {
    let residual = estimate.rotation() * truth.rotation().transpose();
    let e = euler_zyx_from_matrix(&residual);
    let per_axis_deg = e.per_axis().map(f64::abs);
    RotationError {
        mean_deg: per_axis_deg.iter().sum::<f64>() / 3.0,
        per_axis_deg,
        gimbal_lock: e.gimbal_lock,
    }
}

/// Mean absolute per-axis difference between the displacements both transforms
/// apply to `truth`'s pivot.
pub fn translation_error_vox(truth: &RigidTransform, estimate: &RigidTransform) -> f64 {
    let est = estimate.recentered(*truth.center());
    let d = est.translation() - truth.translation();
    d.iter().map(|v| v.abs()).sum::<f64>() / 3.0
}

/// Dice overlap `2|A∩B| / (|A| + |B|)` of voxels strictly above `threshold`.
/// Two empty masks overlap perfectly.
pub fn dice(a: &Volume3, b: &Volume3, threshold: f32) -> Result<f64, GeomError> {
    if !a.same_shape(b) {
        return Err(GeomError::DimsMismatch(a.dims(), b.dims()));
    }
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&va, &vb) in a.data().iter().zip(b.data()) {
        let (ia, ib) = (va > threshold, vb > threshold);
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}
