//! The feature extractor: a stack of steerable convolutions with gated
//! nonlinearities between them, mapping one scalar field to scalar features.
//!
//! Model file layout: the 4 bytes `ECNN`, a `u32` LE header length, a JSON
//! [`ModelHeader`], then all coefficients of layer 0, 1, ... followed by all
//! gate biases of hidden layer 0, 1, ..., every value an `f32` LE.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::basis::BasisParams;
use super::field::FieldType;
use super::layer::{econv_forward, equivariant_nonlinearity, BasisSet, EquivariantLayer};
use super::SteerError;
use crate::conv::{FeatureMap, Real};
use crate::geom3d::Volume3;

pub const MODEL_MAGIC: &[u8; 4] = b"ECNN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcnnConfig {
    /// Field type of every hidden layer.
    pub hidden: FieldType,
    /// Number of convolutions.
    pub depth: usize,
    /// Scalar output channels.
    pub outputs: usize,
    pub basis: BasisParams,
}

impl EcnnConfig {
    /// Five layers, hidden fields 4/16/16 of orders 0/1/2, 64 scalar outputs.
    pub fn wide() -> Self {
        Self {
            hidden: FieldType::new(vec![4, 16, 16]).unwrap(),
            depth: 5,
            outputs: 64,
            basis: BasisParams::default(),
        }
    }

    /// Same structure with narrow hidden fields, sized for single-core runs.
    pub fn desk() -> Self {
        Self {
            hidden: FieldType::new(vec![4, 4, 2]).unwrap(),
            ..Self::wide()
        }
    }

    pub fn with_blur(mut self, blur: f64) -> Self {
        self.basis.blur = blur;
        self
    }

    fn validate(&self) -> Result<(), SteerError> {
        if self.depth < 2 {
            return Err(SteerError::BadConfig("depth must be at least 2"));
        }
        if self.outputs == 0 {
            return Err(SteerError::BadConfig("need at least one output channel"));
        }
        Ok(())
    }

    /// Multiply-accumulates per voxel for one forward pass.
    pub fn macs_per_voxel(&self) -> usize {
        let taps = self.basis.taps();
        let h = self.hidden.channels();
        taps * (h + (self.depth - 2) * h * h + h * self.outputs)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelHeader {
    pub config: EcnnConfig,
    pub seed: u64,
    pub coeff_counts: Vec<usize>,
    pub gate_counts: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Ecnn {
    config: EcnnConfig,
    seed: u64,
    layers: Vec<EquivariantLayer>,
    gate_biases: Vec<Vec<f32>>,
}

impl Ecnn {
    /// Network with coefficients drawn from `seed` and zero gate biases.
    pub fn new(config: EcnnConfig, seed: u64) -> Result<Self, SteerError> {
        let mut net = Self::zeroed(config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut net.layers {
            layer.randomize(&mut rng);
        }
        Ok(net)
    }

    fn zeroed(config: EcnnConfig, seed: u64) -> Result<Self, SteerError> {
        config.validate()?;
        let mut set = BasisSet::new(config.basis);
        let mut layers = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let t_in = if i == 0 {
                FieldType::scalars(1)
            } else {
                config.hidden.clone()
            };
            let t_out = if i + 1 == config.depth {
                FieldType::scalars(config.outputs)
            } else {
                config.hidden.clone()
            };
            layers.push(EquivariantLayer::new(t_in, t_out, &mut set)?);
        }
        let gate_biases = vec![vec![0.0; config.hidden.gated_subfields()]; config.depth - 1];
        Ok(Self {
            config,
            seed,
            layers,
            gate_biases,
        })
    }

    pub fn config(&self) -> &EcnnConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[EquivariantLayer] {
        &self.layers
    }

    pub fn gate_biases(&self) -> &[Vec<f32>] {
        &self.gate_biases
    }

    /// Number of trainable values (coefficients and gate biases).
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.len()).sum::<usize>()
            + self.gate_biases.iter().map(|g| g.len()).sum::<usize>()
    }

    /// All trainable values in file order.
    pub fn params(&self) -> Vec<f32> {
        let mut p = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            p.extend_from_slice(l.coeffs());
        }
        for g in &self.gate_biases {
            p.extend_from_slice(g);
        }
        p
    }

    pub fn set_params(&mut self, p: &[f32]) -> Result<(), SteerError> {
        if p.len() != self.param_count() {
            return Err(SteerError::ParamCount {
                expected: self.param_count(),
                got: p.len(),
            });
        }
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.len();
            l.coeffs_mut().copy_from_slice(&p[off..off + n]);
            off += n;
        }
        for g in &mut self.gate_biases {
            let n = g.len();
            g.copy_from_slice(&p[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Scalar features of `vol`, one channel per output.
    pub fn forward<T: Real>(&self, vol: &Volume3) -> FeatureMap<T> {
        let mut x = FeatureMap::<T>::from_volume(vol);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = econv_forward(layer, &x).expect("layer types chain");
            if i < last {
                equivariant_nonlinearity(&mut x, &self.config.hidden, &self.gate_biases[i])
                    .expect("gate count matches hidden type");
            }
        }
        x
    }

    pub fn header(&self) -> ModelHeader {
        ModelHeader {
            config: self.config.clone(),
            seed: self.seed,
            coeff_counts: self.layers.iter().map(|l| l.len()).collect(),
            gate_counts: self.gate_biases.iter().map(|g| g.len()).collect(),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), SteerError> {
        let header = serde_json::to_vec(&self.header())?;
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        let mut buf = Vec::with_capacity(self.param_count() * 4);
        for v in self.params() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, SteerError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(SteerError::BadMagic(magic));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut header)?;
        let header: ModelHeader = serde_json::from_slice(&header)?;
        let mut net = Self::zeroed(header.config.clone(), header.seed)?;
        if net.header().coeff_counts != header.coeff_counts
            || net.header().gate_counts != header.gate_counts
        {
            return Err(SteerError::BadConfig(
                "parameter counts disagree with config",
            ));
        }
        let mut bytes = vec![0u8; net.param_count() * 4];
        r.read_exact(&mut bytes)?;
        let p: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        net.set_params(&p)?;
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SteerError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SteerError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// `Φ(I)` in single precision.
pub fn ecnn_forward(net: &Ecnn, vol: &Volume3) -> FeatureMap<f32> {
    net.forward::<f32>(vol)
}
