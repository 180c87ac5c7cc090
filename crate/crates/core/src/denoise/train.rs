//! Adam training of the denoiser on online-augmented phantoms.
//!
//! Checkpoint layout: the 4 bytes `PSI1`, a `u32` LE header length, a JSON
//! [`CheckpointHeader`], then parameters, first moments and second moments,
//! each `param_count` `f32` LE values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::unet::{loss_psi, DenoiserConfig, DenoiserNet};
use super::DenoiseError;
use crate::conv::FeatureMap;
use crate::corrupt::{CorruptionDraw, NoiseParams};
use crate::geom3d::{warp, Interp, RigidTransform, Volume3};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PSI1";

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: DenoiserConfig,
    pub step: u64,
    pub lr: f64,
    pub seed: u64,
    pub param_count: usize,
}

/// Parameters, Adam moments and the per-step loss history.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    net: DenoiserNet,
    m: Vec<f32>,
    v: Vec<f32>,
    step: u64,
    lr: f64,
    seed: u64,
    history: Vec<f64>,
}

impl TrainState {
    pub fn new(net: DenoiserNet, lr: f64, seed: u64) -> Self {
        let n = net.param_count();
        Self {
            net,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            lr,
            seed,
            history: Vec::new(),
        }
    }

    pub fn net(&self) -> &DenoiserNet {
        &self.net
    }

    pub fn into_net(self) -> DenoiserNet {
        self.net
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Training loss of every step taken so far.
    pub fn history(&self) -> &[f64] {
        &self.history
    }

    /// One bias-corrected Adam update.
    pub fn adam_step(&mut self, grads: &[f32]) {
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        let params = self.net.params_mut();
        for i in 0..grads.len() {
            let g = grads[i] as f64;
            let m = ADAM_BETA1 * self.m[i] as f64 + (1.0 - ADAM_BETA1) * g;
            let v = ADAM_BETA2 * self.v[i] as f64 + (1.0 - ADAM_BETA2) * g * g;
            self.m[i] = m as f32;
            self.v[i] = v as f32;
            let upd = self.lr * (m / c1) / ((v / c2).sqrt() + ADAM_EPS);
            params[i] = (params[i] as f64 - upd) as f32;
        }
    }

    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            config: *self.net.config(),
            step: self.step,
            lr: self.lr,
            seed: self.seed,
            param_count: self.net.param_count(),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), DenoiseError> {
        let header = serde_json::to_vec(&self.header())?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        for block in [self.net.params(), &self.m, &self.v] {
            let bytes: Vec<u8> = block.iter().flat_map(|v| v.to_le_bytes()).collect();
            w.write_all(&bytes)?;
        }
        Ok(())
    }

    /// Restores a checkpoint. The loss history is stored separately and starts empty.
    pub fn read_from<R: Read>(mut r: R) -> Result<Self, DenoiseError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(DenoiseError::BadMagic(magic));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut header)?;
        let h: CheckpointHeader = serde_json::from_slice(&header)?;
        let mut read_block = || -> Result<Vec<f32>, DenoiseError> {
            let mut bytes = vec![0u8; h.param_count * 4];
            r.read_exact(&mut bytes)?;
            Ok(bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        };
        let params = read_block()?;
        let m = read_block()?;
        let v = read_block()?;
        Ok(Self {
            net: DenoiserNet::from_params(h.config, params)?,
            m,
            v,
            step: h.step,
            lr: h.lr,
            seed: h.seed,
            history: Vec::new(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DenoiseError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DenoiseError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    /// Rows `step,loss`.
    pub fn write_history_csv<W: Write>(&self, w: W) -> Result<(), DenoiseError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step", "loss"])?;
        for (i, l) in self.history.iter().enumerate() {
            out.write_record([(i + 1).to_string(), l.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Loads a network from a checkpoint, discarding optimizer state.
pub fn load_denoiser(path: impl AsRef<Path>) -> Result<DenoiserNet, DenoiseError> {
    Ok(TrainState::load(path)?.into_net())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub noise: NoiseParams,
    /// Per-axis Euler range of the spatial augmentation, degrees.
    pub rot_range_deg: f64,
    /// Per-axis translation range of the spatial augmentation, voxels.
    pub trans_range_vox: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-3,
            noise: NoiseParams::training(),
            rot_range_deg: 45.0,
            trans_range_vox: 3.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Held-out MSE between corrupted input and clean target.
    pub corrupted_mse: f64,
    pub initial_mse: f64,
    pub final_mse: f64,
    pub steps: usize,
}

/// One augmented training example: clean target and its corruption.
pub fn augmented_example<R: Rng + ?Sized>(
    clean: &Volume3,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(Volume3, Volume3), DenoiseError> {
    let t = RigidTransform::sample(cfg.rot_range_deg, cfg.trans_range_vox, clean.center(), rng);
    let target = warp(clean, &t, Interp::Trilinear);
    let draw = CorruptionDraw::sample(target.dims(), &cfg.noise, rng)?;
    let input = draw.apply(&target)?;
    Ok((input, target))
}

/// Mean denoising MSE of `net` over `(input, target)` pairs.
pub fn heldout_mse(net: &DenoiserNet, pairs: &[(Volume3, Volume3)]) -> Result<f64, DenoiseError> {
    let mut total = 0.0;
    for (input, target) in pairs {
        let out = net.forward::<f32>(&FeatureMap::from_volume(input))?;
        total += out
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
            .sum::<f64>()
            / target.len() as f64;
    }
    Ok(total / pairs.len().max(1) as f64)
}

/// Fixed held-out examples drawn from `vols` with their own stream.
pub fn heldout_set(
    vols: &[Volume3],
    cfg: &TrainConfig,
) -> Result<Vec<(Volume3, Volume3)>, DenoiseError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_4e1d);
    vols.iter()
        .map(|v| augmented_example(v, cfg, &mut rng))
        .collect()
}

/// Trains `state` for `cfg.steps` Adam steps, one online-augmented example
/// per step. Stops with [`DenoiseError::Diverged`] on a non-finite loss.
pub fn train_denoiser(
    corpus: &[Volume3],
    heldout: &[Volume3],
    cfg: &TrainConfig,
    state: &mut TrainState,
    mut progress: impl FnMut(u64, f64),
) -> Result<TrainReport, DenoiseError> {
    if corpus.is_empty() {
        return Err(DenoiseError::EmptyCorpus);
    }
    let held = heldout_set(heldout, cfg)?;
    let corrupted_mse =
        held.iter().map(|(i, t)| i.mse(t)).sum::<Result<f64, _>>()? / held.len().max(1) as f64;
    let initial_mse = heldout_mse(state.net(), &held)?;
    state.lr = cfg.lr;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.steps {
        let clean = &corpus[rng.random_range(0..corpus.len())];
        let (input, target) = augmented_example(clean, cfg, &mut rng)?;
        let params = state.net.params().to_vec();
        let (loss, grads) = loss_psi(
            &state.net,
            &params,
            &FeatureMap::<f32>::from_volume(&input),
            &FeatureMap::from_volume(&target),
        )?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(DenoiseError::Diverged {
                step: state.step + 1,
            });
        }
        state.adam_step(&grads);
        state.history.push(loss);
        progress(state.step, loss);
    }
    let final_mse = heldout_mse(state.net(), &held)?;
    Ok(TrainReport {
        corrupted_mse,
        initial_mse,
        final_mse,
        steps: cfg.steps,
    })
}
