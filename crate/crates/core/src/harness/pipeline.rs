use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::phantom::Phantom;
use super::HarnessError;
use crate::closedform::{centers_of_mass, solve_rigid, WeightedPointCloud};
use crate::corrupt::{CorruptionDraw, NoiseParams};
use crate::denoise::{denoiser_forward, DenoiserNet};
use crate::geom3d::{
    dice, rotation_error_deg, translation_error_vox, warp, Interp, RigidTransform, Volume3,
};
use crate::steerable::Ecnn;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairConfig {
    /// Per-axis Euler range of each view's transform, degrees.
    pub rot_range_deg: f64,
    /// Per-axis translation range of each view's transform, voxels.
    pub trans_range_vox: f64,
    pub noise: NoiseParams,
    /// Each corrupted view is cut to its own mask dilated by this many voxels.
    #[serde(default = "default_dilation")]
    pub mask_dilation_vox: usize,
}

fn default_dilation() -> usize {
    MASK_DILATION_VOX
}

pub const MASK_DILATION_VOX: usize = 2;

impl PairConfig {
    /// Test ranges: 45°, 6 voxels, test corruption caps.
    pub fn test_caps() -> Self {
        Self {
            rot_range_deg: 45.0,
            trans_range_vox: 6.0,
            noise: NoiseParams::test_caps(),
            mask_dilation_vox: MASK_DILATION_VOX,
        }
    }

    pub fn noise_free(rot_range_deg: f64, trans_range_vox: f64) -> Self {
        Self {
            rot_range_deg,
            trans_range_vox,
            noise: NoiseParams::zero(),
            mask_dilation_vox: MASK_DILATION_VOX,
        }
    }
}

/// Two corrupted views of one phantom and the motion between them.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedPair {
    pub fixed: Volume3,
    pub moving: Volume3,
    pub t1: RigidTransform,
    pub t2: RigidTransform,
    /// `T₂ ∘ T₁⁻¹`, mapping fixed-view coordinates to moving-view coordinates.
    pub truth: RigidTransform,
    /// Phantom mask in the fixed view.
    pub fixed_mask: Volume3,
    pub fixed_draw: CorruptionDraw,
    pub moving_draw: CorruptionDraw,
}

/// Binary mask of voxels within `radius` voxels of a voxel above 0.5.
pub fn dilate_mask(mask: &Volume3, radius: usize) -> Volume3 {
    let r = radius as i64;
    let offsets: Vec<[i64; 3]> = (-r..=r)
        .flat_map(|x| (-r..=r).flat_map(move |y| (-r..=r).map(move |z| [x, y, z])))
        .filter(|o| o[0] * o[0] + o[1] * o[1] + o[2] * o[2] <= r * r)
        .collect();
    Volume3::from_fn(mask.dims(), |x, y, z| {
        let hit = offsets
            .iter()
            .any(|o| mask.get_or_zero(x as i64 + o[0], y as i64 + o[1], z as i64 + o[2]) > 0.5);
        if hit {
            1.0
        } else {
            0.0
        }
    })
}

fn cut(vol: &Volume3, mask: &Volume3) -> Volume3 {
    let mut out = vol.clone();
    for (v, m) in out.data_mut().iter_mut().zip(mask.data()) {
        *v *= m;
    }
    out
}

/// `fixed = ζ₁(T₁∘I)`, `moving = ζ₂(T₂∘I)` with independent transforms and
/// draws, each cut to its own dilated mask.
pub fn simulate_pair(
    phantom: &Phantom,
    cfg: &PairConfig,
    seed: u64,
) -> Result<SimulatedPair, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = phantom.image.center();
    let t1 = RigidTransform::sample(cfg.rot_range_deg, cfg.trans_range_vox, c, &mut rng);
    let t2 = RigidTransform::sample(cfg.rot_range_deg, cfg.trans_range_vox, c, &mut rng);
    let v1 = warp(&phantom.image, &t1, Interp::Trilinear);
    let v2 = warp(&phantom.image, &t2, Interp::Trilinear);
    let fixed_draw = CorruptionDraw::sample(v1.dims(), &cfg.noise, &mut rng)?;
    let moving_draw = CorruptionDraw::sample(v2.dims(), &cfg.noise, &mut rng)?;
    let fixed_mask = warp(&phantom.mask, &t1, Interp::Trilinear);
    let moving_mask = warp(&phantom.mask, &t2, Interp::Trilinear);
    Ok(SimulatedPair {
        fixed: cut(
            &fixed_draw.apply(&v1)?,
            &dilate_mask(&fixed_mask, cfg.mask_dilation_vox),
        ),
        moving: cut(
            &moving_draw.apply(&v2)?,
            &dilate_mask(&moving_mask, cfg.mask_dilation_vox),
        ),
        truth: RigidTransform::compose(&t2, &t1.inverse()),
        fixed_mask,
        t1,
        t2,
        fixed_draw,
        moving_draw,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackOutput {
    /// Estimated fixed-to-moving motion, pivoting at the fixed grid center.
    pub transform: RigidTransform,
    pub fixed_cloud: WeightedPointCloud,
    pub moving_cloud: WeightedPointCloud,
}

/// `Ψ(v)` restricted to the support of `v` and clamped at zero. Views arrive
/// cut to their masks, so this keeps the denoised image on the same support.
pub fn denoise_view(psi: &DenoiserNet, v: &Volume3) -> Result<Volume3, HarnessError> {
    let mut out = denoiser_forward(psi, v)?;
    for (o, i) in out.data_mut().iter_mut().zip(v.data()) {
        *o = if *i == 0.0 { 0.0 } else { o.max(0.0) };
    }
    Ok(out)
}

/// Denoises both views (if `psi` is given), extracts features, collapses them
/// to weighted centers of mass and solves for the rigid motion.
pub fn track(
    psi: Option<&DenoiserNet>,
    phi: &Ecnn,
    fixed: &Volume3,
    moving: &Volume3,
) -> Result<TrackOutput, HarnessError> {
    if fixed.dims() != moving.dims() {
        return Err(HarnessError::BadConfig(
            "fixed and moving views differ in dims",
        ));
    }
    let clouds = |v: &Volume3| -> Result<WeightedPointCloud, HarnessError> {
        let clean = match psi {
            Some(net) => denoise_view(net, v)?,
            None => v.clone(),
        };
        Ok(centers_of_mass(&phi.forward::<f32>(&clean))?)
    };
    let fixed_cloud = clouds(fixed)?;
    let moving_cloud = clouds(moving)?;
    let transform = solve_rigid(&fixed_cloud, &moving_cloud)?.recentered(fixed.center());
    Ok(TrackOutput {
        transform,
        fixed_cloud,
        moving_cloud,
    })
}

/// Errors of one tracked pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub rot_err_deg: f64,
    pub trans_err_vox: f64,
    pub dice: f64,
}

/// Rotation and translation errors, and the Dice overlap between the
/// fixed-view mask and its image under `T̂⁻¹ ∘ T`.
pub fn score_pair(
    fixed_mask: &Volume3,
    truth: &RigidTransform,
    estimate: &RigidTransform,
) -> Result<PairScore, HarnessError> {
    let residual = RigidTransform::compose(&estimate.recentered(*truth.center()).inverse(), truth);
    let moved = warp(fixed_mask, &residual, Interp::Trilinear);
    Ok(PairScore {
        rot_err_deg: rotation_error_deg(truth, estimate).mean_deg,
        trans_err_vox: translation_error_vox(truth, estimate),
        dice: dice(&moved, fixed_mask, 0.5)?,
    })
}

/// Tracks one simulated pair and scores it; returns the estimate, the score
/// and the wall time in seconds.
pub fn track_pair(
    psi: Option<&DenoiserNet>,
    phi: &Ecnn,
    pair: &SimulatedPair,
) -> Result<(RigidTransform, PairScore, f64), HarnessError> {
    let start = Instant::now();
    let out = track(psi, phi, &pair.fixed, &pair.moving)?;
    let secs = start.elapsed().as_secs_f64();
    let score = score_pair(&pair.fixed_mask, &pair.truth, &out.transform)?;
    Ok((out.transform, score, secs))
}
