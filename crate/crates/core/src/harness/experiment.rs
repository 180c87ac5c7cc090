use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::phantom::{make_phantom_with, PhantomSpec};
use super::pipeline::{simulate_pair, track_pair, PairConfig, MASK_DILATION_VOX};
use super::report::{evaluate, MeanStd, PairRecord, TrackingReport};
use super::HarnessError;
use crate::corrupt::NoiseParams;
use crate::denoise::DenoiserNet;
use crate::steerable::{Ecnn, EcnnConfig};

/// Phantom settings shared by every pair of an experiment; seeds vary per pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomTemplate {
    pub dims: [usize; 3],
    pub n_blobs: usize,
    pub extent: f64,
}

impl PhantomTemplate {
    pub fn spec(&self, seed: u64) -> PhantomSpec {
        PhantomSpec::new(self.dims, self.n_blobs, seed).with_extent(self.extent)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub phantom: PhantomTemplate,
    pub pairs: PairConfig,
    pub n_pairs: usize,
    pub seed: u64,
    pub ecnn: EcnnConfig,
    pub ecnn_seed: u64,
}

impl ExperimentConfig {
    /// Noise-free tracking at 64³ over the test motion ranges.
    pub fn noise_free_64() -> Self {
        Self {
            phantom: PhantomTemplate {
                dims: [64, 64, 64],
                n_blobs: 6,
                extent: 0.8,
            },
            pairs: PairConfig::noise_free(45.0, 6.0),
            n_pairs: 50,
            seed: 1,
            ecnn: EcnnConfig::desk(),
            ecnn_seed: 7,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.pairs.rot_range_deg < 0.0 || self.pairs.trans_range_vox < 0.0 {
            return Err(HarnessError::BadConfig("motion ranges must be nonnegative"));
        }
        Ok(())
    }

    /// `(phantom seed, pair seed)` of every pair.
    pub fn pair_seeds(&self) -> Vec<(u64, u64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.n_pairs)
            .map(|_| (rng.random(), rng.random()))
            .collect()
    }
}

/// Simulates and tracks every pair of `cfg`. Pairs run in parallel; each is
/// fully determined by its seeds.
pub fn run_tracking(
    cfg: &ExperimentConfig,
    psi: Option<&DenoiserNet>,
) -> Result<TrackingReport, HarnessError> {
    cfg.validate()?;
    let phi = Ecnn::new(cfg.ecnn.clone(), cfg.ecnn_seed)?;
    run_tracking_with(cfg, psi, &phi)
}

pub fn run_tracking_with(
    cfg: &ExperimentConfig,
    psi: Option<&DenoiserNet>,
    phi: &Ecnn,
) -> Result<TrackingReport, HarnessError> {
    let rows = cfg
        .pair_seeds()
        .into_par_iter()
        .enumerate()
        .map(|(i, (ps, qs))| {
            let phantom = make_phantom_with(&cfg.phantom.spec(ps))?;
            let pair = simulate_pair(&phantom, &cfg.pairs, qs)?;
            let (est, score, secs) = track_pair(psi, phi, &pair)?;
            Ok(PairRecord::new(
                i,
                ps,
                qs,
                &pair.truth,
                &est,
                score.rot_err_deg,
                score.trans_err_vox,
                score.dice,
                secs,
            ))
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    Ok(TrackingReport { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepFactor {
    Rotation,
    Translation,
    Bias,
    Noise,
}

impl SweepFactor {
    pub const ALL: [SweepFactor; 4] = [Self::Rotation, Self::Translation, Self::Bias, Self::Noise];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Rotation => "rotation",
            Self::Translation => "translation",
            Self::Bias => "bias",
            Self::Noise => "noise",
        }
    }
}

/// Starting point of every sweep; one factor moves away from it at a time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepBaseline {
    pub rot_range_deg: f64,
    pub trans_range_vox: f64,
    pub bias: f64,
    pub noise: f64,
}

impl Default for SweepBaseline {
    fn default() -> Self {
        Self {
            rot_range_deg: 15.0,
            trans_range_vox: 2.0,
            bias: 0.0,
            noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Phantom, seeds, network and pairs per level. Its motion and noise are
    /// replaced by the baseline and the swept level.
    pub base: ExperimentConfig,
    pub baseline: SweepBaseline,
    pub rotation: Vec<f64>,
    pub translation: Vec<f64>,
    pub bias: Vec<f64>,
    pub noise: Vec<f64>,
}

impl SweepConfig {
    pub fn levels(&self, f: SweepFactor) -> &[f64] {
        match f {
            SweepFactor::Rotation => &self.rotation,
            SweepFactor::Translation => &self.translation,
            SweepFactor::Bias => &self.bias,
            SweepFactor::Noise => &self.noise,
        }
    }

    /// Pair settings with `factor` set to `level` and the rest at baseline.
    pub fn pair_config(&self, factor: SweepFactor, level: f64) -> PairConfig {
        let b = self.baseline;
        let (mut rot, mut trans, mut bias, mut noise) =
            (b.rot_range_deg, b.trans_range_vox, b.bias, b.noise);
        match factor {
            SweepFactor::Rotation => rot = level,
            SweepFactor::Translation => trans = level,
            SweepFactor::Bias => bias = level,
            SweepFactor::Noise => noise = level,
        }
        PairConfig {
            rot_range_deg: rot,
            trans_range_vox: trans,
            noise: NoiseParams {
                sigma_b_max: bias,
                sigma_gamma: 0.0,
                sigma_xi_max: noise,
                ..NoiseParams::zero()
            },
            mask_dilation_vox: MASK_DILATION_VOX,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepLevel {
    pub factor: SweepFactor,
    pub level: f64,
    pub report: TrackingReport,
}

/// Runs each factor's levels. Every level reuses the same pair seeds, so
/// levels differ only in the swept factor.
pub fn sensitivity_sweep(
    cfg: &SweepConfig,
    psi: Option<&DenoiserNet>,
) -> Result<Vec<SweepLevel>, HarnessError> {
    let phi = Ecnn::new(cfg.base.ecnn.clone(), cfg.base.ecnn_seed)?;
    sensitivity_sweep_with(cfg, psi, &phi)
}

pub fn sensitivity_sweep_with(
    cfg: &SweepConfig,
    psi: Option<&DenoiserNet>,
    phi: &Ecnn,
) -> Result<Vec<SweepLevel>, HarnessError> {
    let mut out = Vec::new();
    for factor in SweepFactor::ALL {
        for &level in cfg.levels(factor) {
            let exp = ExperimentConfig {
                pairs: cfg.pair_config(factor, level),
                ..cfg.base.clone()
            };
            exp.validate()?;
            out.push(SweepLevel {
                factor,
                level,
                report: run_tracking_with(&exp, psi, phi)?,
            });
        }
    }
    Ok(out)
}

/// Rows `level,n,rot_mean,rot_std,trans_mean,trans_std,dice_mean,dice_std`
/// for the levels of one factor.
pub fn write_sweep_csv<W: Write>(
    levels: &[SweepLevel],
    factor: SweepFactor,
    w: W,
) -> Result<(), HarnessError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "level",
        "n",
        "rot_mean",
        "rot_std",
        "trans_mean",
        "trans_std",
        "dice_mean",
        "dice_std",
    ])?;
    for l in levels.iter().filter(|l| l.factor == factor) {
        let s = evaluate(&l.report)?;
        let f = |m: MeanStd| [m.mean.to_string(), m.std.to_string()];
        let mut row = vec![l.level.to_string(), s.n.to_string()];
        row.extend(f(s.rot_err_deg));
        row.extend(f(s.trans_err_vox));
        row.extend(f(s.dice));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}
