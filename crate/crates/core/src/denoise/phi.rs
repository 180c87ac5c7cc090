//! Derivative-free fitting of the feature extractor's coefficients through
//! the closed-form head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DenoiseError;
use crate::geom3d::{rotation_angle_deg, warp, Interp, RigidTransform, Volume3};
use crate::harness::track;
use crate::steerable::Ecnn;

/// Mean squared difference between `T₂∘I` and `T̂∘(T₁∘I)`, where `T̂` is
/// estimated by the network and solver from the two views.
pub fn loss_phi(
    net: &Ecnn,
    anchor: &Volume3,
    t1: &RigidTransform,
    t2: &RigidTransform,
) -> Result<f64, DenoiseError> {
    let fixed = warp(anchor, t1, Interp::Trilinear);
    let moving = warp(anchor, t2, Interp::Trilinear);
    let est = track(None, net, &fixed, &moving)?.transform;
    let pred = warp(&fixed, &est, Interp::Trilinear);
    Ok(moving.mse(&pred)?)
}

/// Rotation angle of `R̂ᵀ R`, radians.
pub fn geodesic_loss(estimate: &RigidTransform, truth: &RigidTransform) -> f64 {
    rotation_angle_deg(&(estimate.rotation().transpose() * truth.rotation())).to_radians()
}

/// Geodesic loss of the estimate for one view pair.
pub fn loss_geodesic(
    net: &Ecnn,
    anchor: &Volume3,
    t1: &RigidTransform,
    t2: &RigidTransform,
) -> Result<f64, DenoiseError> {
    let fixed = warp(anchor, t1, Interp::Trilinear);
    let moving = warp(anchor, t2, Interp::Trilinear);
    let est = track(None, net, &fixed, &moving)?.transform;
    let truth = RigidTransform::compose(t2, &t1.inverse()).recentered(*est.center());
    Ok(geodesic_loss(&est, &truth))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiObjective {
    #[default]
    Image,
    Geodesic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub steps: usize,
    /// Initial coordinate step.
    pub delta: f64,
    pub objective: PhiObjective,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            delta: 0.05,
            objective: PhiObjective::Image,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Loss after every step.
    pub history: Vec<f64>,
    pub accepted: usize,
}

/// One training view pair: anchor volume and the two transforms applied to it.
pub type ViewPair = (Volume3, RigidTransform, RigidTransform);

fn mean_loss(net: &Ecnn, pairs: &[ViewPair], objective: PhiObjective) -> Result<f64, DenoiseError> {
    let mut total = 0.0;
    for (anchor, t1, t2) in pairs {
        total += match objective {
            PhiObjective::Image => loss_phi(net, anchor, t1, t2)?,
            PhiObjective::Geodesic => loss_geodesic(net, anchor, t1, t2)?,
        };
    }
    Ok(total / pairs.len().max(1) as f64)
}

/// Random coordinate descent: each step perturbs one parameter by `±δ` and
/// keeps the change only if the mean loss drops. `δ` shrinks by 0.7 after
/// every rejected step, so the loss never increases.
pub fn fit_coefficients(
    net: &mut Ecnn,
    pairs: &[ViewPair],
    cfg: &FitConfig,
) -> Result<FitReport, DenoiseError> {
    if pairs.is_empty() {
        return Err(DenoiseError::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = net.params();
    let mut best = mean_loss(net, pairs, cfg.objective)?;
    let initial_loss = best;
    let mut delta = cfg.delta;
    let mut history = Vec::with_capacity(cfg.steps);
    let mut accepted = 0;
    for _ in 0..cfg.steps {
        let i = rng.random_range(0..params.len());
        let orig = params[i];
        let mut improved = false;
        for sign in [1.0f32, -1.0] {
            params[i] = orig + sign * delta as f32;
            net.set_params(&params)?;
            match mean_loss(net, pairs, cfg.objective) {
                Ok(l) if l < best => {
                    best = l;
                    improved = true;
                    break;
                }
                _ => {}
            }
        }
        if improved {
            accepted += 1;
        } else {
            params[i] = orig;
            net.set_params(&params)?;
            delta *= 0.7;
        }
        history.push(best);
    }
    Ok(FitReport {
        initial_loss,
        final_loss: best,
        history,
        accepted,
    })
}
