//! Self-describing run records. Every experiment writes `manifest.json` with
//! its full config, input file hashes and output file hashes; replaying the
//! manifest reruns the experiment and compares the outputs byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::experiment::{
    run_tracking_with, sensitivity_sweep_with, write_sweep_csv, ExperimentConfig, SweepConfig,
    SweepFactor, SweepLevel,
};
use super::report::{evaluate, TrackingReport};
use super::HarnessError;
use crate::denoise::{load_denoiser, DenoiserNet};
use crate::steerable::{Ecnn, EcnnConfig};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: impl AsRef<Path>, name: &str) -> Result<Self, HarnessError> {
        Ok(Self {
            path: name.to_string(),
            sha256: sha256_file(path)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    /// Input files by the path they were read from.
    pub inputs: Vec<FileDigest>,
    /// Deterministic outputs, relative to the output directory.
    pub outputs: Vec<FileDigest>,
}

impl Manifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Hashes `name` inside `dir` and lists it as an output.
    pub fn add_output(&mut self, dir: &Path, name: &str) -> Result<(), HarnessError> {
        self.outputs.push(FileDigest::of(dir.join(name), name)?);
        Ok(())
    }

    pub fn add_input(&mut self, path: &Path) -> Result<(), HarnessError> {
        let name = path.to_string_lossy().into_owned();
        self.inputs.push(FileDigest::of(path, &name)?);
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf, HarnessError> {
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_vec_pretty(self)?)?;
        Ok(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String, HarnessError> {
    Ok(sha256_bytes(&fs::read(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrackRun {
    config: ExperimentConfig,
    denoiser: Option<String>,
    #[serde(default)]
    ecnn_model: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SweepRun {
    config: SweepConfig,
    denoiser: Option<String>,
    #[serde(default)]
    ecnn_model: Option<String>,
}

fn load_psi(
    path: Option<&Path>,
    manifest: &mut Manifest,
) -> Result<Option<DenoiserNet>, HarnessError> {
    match path {
        Some(p) => {
            manifest.add_input(p)?;
            Ok(Some(load_denoiser(p)?))
        }
        None => Ok(None),
    }
}

/// A saved network if one is given, otherwise a fresh one from `config` and `seed`.
fn load_phi(
    path: Option<&Path>,
    config: &EcnnConfig,
    seed: u64,
    manifest: &mut Manifest,
) -> Result<Ecnn, HarnessError> {
    match path {
        Some(p) => {
            manifest.add_input(p)?;
            Ok(Ecnn::load(p)?)
        }
        None => Ok(Ecnn::new(config.clone(), seed)?),
    }
}

/// Optional model files of a run.
#[derive(Debug, Clone, Copy, Default)]
pub struct Models<'a> {
    pub denoiser: Option<&'a Path>,
    pub ecnn: Option<&'a Path>,
}

fn path_string(p: Option<&Path>) -> Option<String> {
    p.map(|p| p.to_string_lossy().into_owned())
}

/// Runs a tracking experiment into `out_dir`: `report.csv`, `summary.json`,
/// `timing.csv` and the manifest. Timing is not hashed.
pub fn execute_track(
    cfg: &ExperimentConfig,
    models: Models<'_>,
    out_dir: &Path,
) -> Result<(TrackingReport, Manifest), HarnessError> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let run = TrackRun {
        config: cfg.clone(),
        denoiser: path_string(models.denoiser),
        ecnn_model: path_string(models.ecnn),
    };
    let mut manifest = Manifest::new("track", serde_json::to_value(&run)?);
    let psi = load_psi(models.denoiser, &mut manifest)?;
    let phi = load_phi(models.ecnn, &cfg.ecnn, cfg.ecnn_seed, &mut manifest)?;
    let report = run_tracking_with(cfg, psi.as_ref(), &phi)?;
    fs::write(out_dir.join("report.csv"), report.to_csv_bytes())?;
    manifest.add_output(out_dir, "report.csv")?;
    if !report.is_empty() {
        let mut s = evaluate(&report)?;
        s.seconds.mean = 0.0;
        s.seconds.std = 0.0;
        fs::write(out_dir.join("summary.json"), serde_json::to_vec_pretty(&s)?)?;
        manifest.add_output(out_dir, "summary.json")?;
    }
    report.write_timing_csv(fs::File::create(out_dir.join("timing.csv"))?)?;
    manifest.save(out_dir)?;
    Ok((report, manifest))
}

/// Runs a sensitivity sweep into `out_dir`: one summary CSV per factor
/// (`sweep_<factor>.csv`), the per-pair rows of every level
/// (`sweep_pairs.csv`) and the manifest.
pub fn execute_sweep(
    cfg: &SweepConfig,
    models: Models<'_>,
    out_dir: &Path,
) -> Result<(Vec<SweepLevel>, Manifest), HarnessError> {
    fs::create_dir_all(out_dir)?;
    let run = SweepRun {
        config: cfg.clone(),
        denoiser: path_string(models.denoiser),
        ecnn_model: path_string(models.ecnn),
    };
    let mut manifest = Manifest::new("sweep", serde_json::to_value(&run)?);
    let psi = load_psi(models.denoiser, &mut manifest)?;
    let phi = load_phi(
        models.ecnn,
        &cfg.base.ecnn,
        cfg.base.ecnn_seed,
        &mut manifest,
    )?;
    let levels = sensitivity_sweep_with(cfg, psi.as_ref(), &phi)?;
    for f in SweepFactor::ALL {
        let name = format!("sweep_{}.csv", f.name());
        write_sweep_csv(&levels, f, fs::File::create(out_dir.join(&name))?)?;
        manifest.add_output(out_dir, &name)?;
    }
    let mut w = csv::Writer::from_path(out_dir.join("sweep_pairs.csv"))?;
    w.write_record([
        "factor",
        "level",
        "pair",
        "rot_err_deg",
        "trans_err_vox",
        "dice",
    ])?;
    for l in &levels {
        for r in &l.report.rows {
            w.write_record([
                l.factor.name().to_string(),
                l.level.to_string(),
                r.pair.to_string(),
                r.rot_err_deg.to_string(),
                r.trans_err_vox.to_string(),
                r.dice.to_string(),
            ])?;
        }
    }
    w.flush()?;
    drop(w);
    manifest.add_output(out_dir, "sweep_pairs.csv")?;
    manifest.save(out_dir)?;
    Ok((levels, manifest))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayCheck {
    pub path: String,
    pub expected: String,
    pub actual: String,
}

impl ReplayCheck {
    pub fn matches(&self) -> bool {
        self.expected == self.actual
    }
}

/// Reruns the experiment recorded in `manifest` into `out_dir` and compares
/// every recorded output hash. Input files must still hash as recorded.
pub fn replay(manifest: &Manifest, out_dir: &Path) -> Result<Vec<ReplayCheck>, HarnessError> {
    for input in &manifest.inputs {
        let actual = sha256_file(&input.path)?;
        if actual != input.sha256 {
            return Err(HarnessError::InputChanged(input.path.clone()));
        }
    }
    let fresh = match manifest.command.as_str() {
        "track" => {
            let run: TrackRun = serde_json::from_value(manifest.config.clone())?;
            let models = Models {
                denoiser: run.denoiser.as_deref().map(Path::new),
                ecnn: run.ecnn_model.as_deref().map(Path::new),
            };
            execute_track(&run.config, models, out_dir)?.1
        }
        "sweep" => {
            let run: SweepRun = serde_json::from_value(manifest.config.clone())?;
            let models = Models {
                denoiser: run.denoiser.as_deref().map(Path::new),
                ecnn: run.ecnn_model.as_deref().map(Path::new),
            };
            execute_sweep(&run.config, models, out_dir)?.1
        }
        other => return Err(HarnessError::NotReplayable(other.to_string())),
    };
    Ok(manifest
        .outputs
        .iter()
        .map(|o| ReplayCheck {
            path: o.path.clone(),
            expected: o.sha256.clone(),
            actual: fresh
                .outputs
                .iter()
                .find(|f| f.path == o.path)
                .map(|f| f.sha256.clone())
                .unwrap_or_default(),
        })
        .collect())
}
