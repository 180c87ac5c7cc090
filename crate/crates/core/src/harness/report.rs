use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::geom3d::RigidTransform;

/// One tracked pair. Wall time is kept out of the CSV so that reports are
/// reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair: usize,
    pub phantom_seed: u64,
    pub pair_seed: u64,
    pub rot_err_deg: f64,
    pub trans_err_vox: f64,
    pub dice: f64,
    pub true_yaw: f64,
    pub true_pitch: f64,
    pub true_roll: f64,
    pub true_tx: f64,
    pub true_ty: f64,
    pub true_tz: f64,
    pub est_yaw: f64,
    pub est_pitch: f64,
    pub est_roll: f64,
    pub est_tx: f64,
    pub est_ty: f64,
    pub est_tz: f64,
    #[serde(skip)]
    pub seconds: f64,
}

impl PairRecord {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pair: usize,
        phantom_seed: u64,
        pair_seed: u64,
        truth: &RigidTransform,
        estimate: &RigidTransform,
        rot_err_deg: f64,
        trans_err_vox: f64,
        dice: f64,
        seconds: f64,
    ) -> Self {
        let te = truth.euler_zyx_deg();
        let est = estimate.recentered(*truth.center());
        let ee = est.euler_zyx_deg();
        let (tt, et) = (truth.translation(), est.translation());
        Self {
            pair,
            phantom_seed,
            pair_seed,
            rot_err_deg,
            trans_err_vox,
            dice,
            true_yaw: te.yaw,
            true_pitch: te.pitch,
            true_roll: te.roll,
            true_tx: tt.x,
            true_ty: tt.y,
            true_tz: tt.z,
            est_yaw: ee.yaw,
            est_pitch: ee.pitch,
            est_roll: ee.roll,
            est_tx: et.x,
            est_ty: et.y,
            est_tz: et.z,
            seconds,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrackingReport {
    pub rows: Vec<PairRecord>,
}

impl TrackingReport {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), HarnessError> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, HarnessError> {
        let rows = csv::Reader::from_reader(r)
            .deserialize()
            .collect::<Result<_, _>>()?;
        Ok(Self { rows })
    }

    pub fn to_csv_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        buf
    }

    /// SHA-256 of the CSV form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_csv_bytes()))
    }

    /// Rows `pair,seconds`.
    pub fn write_timing_csv<W: Write>(&self, w: W) -> Result<(), HarnessError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["pair", "seconds"])?;
        for r in &self.rows {
            out.write_record([r.pair.to_string(), r.seconds.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    /// Two-pass mean and standard deviation; `None` for an empty slice.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub rot_err_deg: MeanStd,
    pub trans_err_vox: MeanStd,
    pub dice: MeanStd,
    pub seconds: MeanStd,
}

pub fn evaluate(report: &TrackingReport) -> Result<Summary, HarnessError> {
    let col = |f: fn(&PairRecord) -> f64| -> Result<MeanStd, HarnessError> {
        let v: Vec<f64> = report.rows.iter().map(f).collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(HarnessError::BadConfig(
                "report contains non-finite metrics",
            ));
        }
        MeanStd::of(&v).ok_or(HarnessError::EmptyReport)
    };
    Ok(Summary {
        n: report.len(),
        rot_err_deg: col(|r| r.rot_err_deg)?,
        trans_err_vox: col(|r| r.trans_err_vox)?,
        dice: col(|r| r.dice)?,
        seconds: col(|r| r.seconds)?,
    })
}
