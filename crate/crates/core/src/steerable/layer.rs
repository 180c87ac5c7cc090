use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use super::basis::{BasisParams, SteerableBasis};
use super::field::FieldType;
use super::SteerError;
use crate::conv::{conv3d, FeatureMap, Real};

/// Bases for every `(l, j)` pair a network needs, built once and shared.
#[derive(Debug, Clone)]
pub struct BasisSet {
    params: BasisParams,
    bases: HashMap<(usize, usize), Arc<SteerableBasis>>,
}

impl BasisSet {
    pub fn new(params: BasisParams) -> Self {
        Self {
            params,
            bases: HashMap::new(),
        }
    }

    pub fn params(&self) -> &BasisParams {
        &self.params
    }

    pub fn get(&mut self, l: usize, j: usize) -> Result<Arc<SteerableBasis>, SteerError> {
        if let Some(b) = self.bases.get(&(l, j)) {
            return Ok(b.clone());
        }
        let b = Arc::new(SteerableBasis::build(l, j, self.params)?);
        self.bases.insert((l, j), b.clone());
        Ok(b)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<SteerableBasis>> {
        self.bases.values()
    }
}

#[derive(Debug, Clone)]
struct Block {
    l: usize,
    j: usize,
    basis: Arc<SteerableBasis>,
    offset: usize,
}

/// One steerable convolution between two field types.
///
/// Coefficients are grouped per `(j, l)` order pair; within a pair they are
/// indexed `[out subfield][in subfield][basis element]`.
#[derive(Debug, Clone)]
pub struct EquivariantLayer {
    in_type: FieldType,
    out_type: FieldType,
    blocks: Vec<Block>,
    coeffs: Vec<f32>,
}

impl EquivariantLayer {
    /// Layer with all coefficients zero.
    pub fn new(
        in_type: FieldType,
        out_type: FieldType,
        bases: &mut BasisSet,
    ) -> Result<Self, SteerError> {
        let mut blocks = Vec::new();
        let mut offset = 0;
        for j in 0..=out_type.max_order() {
            for l in 0..=in_type.max_order() {
                let (mo, mi) = (out_type.multiplicity(j), in_type.multiplicity(l));
                if mo == 0 || mi == 0 {
                    continue;
                }
                let basis = bases.get(l, j)?;
                let n = mo * mi * basis.len();
                blocks.push(Block {
                    l,
                    j,
                    basis,
                    offset,
                });
                offset += n;
            }
        }
        Ok(Self {
            in_type,
            out_type,
            blocks,
            coeffs: vec![0.0; offset],
        })
    }

    /// Draws every coefficient from `U(−a, a)`, `a = √(3 / fan_in)`, where
    /// `fan_in` counts basis elements times input subfields feeding an output order.
    pub fn randomize(&mut self, rng: &mut impl Rng) {
        let mut fan_in: HashMap<usize, usize> = HashMap::new();
        for b in &self.blocks {
            *fan_in.entry(b.j).or_default() += self.in_type.multiplicity(b.l) * b.basis.len();
        }
        for bi in 0..self.blocks.len() {
            let (j, range) = {
                let b = &self.blocks[bi];
                (b.j, b.offset..b.offset + self.block_len(b))
            };
            let a = (3.0 / fan_in[&j] as f64).sqrt();
            for c in &mut self.coeffs[range] {
                *c = rng.random_range(-a..a) as f32;
            }
        }
    }

    fn block_len(&self, b: &Block) -> usize {
        self.out_type.multiplicity(b.j) * self.in_type.multiplicity(b.l) * b.basis.len()
    }

    pub fn in_type(&self) -> &FieldType {
        &self.in_type
    }

    pub fn out_type(&self) -> &FieldType {
        &self.out_type
    }

    pub fn kernel_size(&self) -> usize {
        self.blocks[0].basis.params().size
    }

    pub fn coeffs(&self) -> &[f32] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f32] {
        &mut self.coeffs
    }

    /// Dense kernel `[out channel][in channel][tap]` from the current coefficients.
    pub fn assemble<T: Real>(&self) -> Vec<T> {
        let taps = self.blocks[0].basis.params().taps();
        let c_in = self.in_type.channels();
        let c_out = self.out_type.channels();
        let mut w = vec![0.0f64; c_out * c_in * taps];
        for b in &self.blocks {
            let (dj, dl) = (2 * b.j + 1, 2 * b.l + 1);
            let (mo, mi) = (
                self.out_type.multiplicity(b.j),
                self.in_type.multiplicity(b.l),
            );
            let (out0, in0) = (self.out_type.offset(b.j), self.in_type.offset(b.l));
            let nb = b.basis.len();
            for o in 0..mo {
                for i in 0..mi {
                    for e in 0..nb {
                        let nu = self.coeffs[b.offset + (o * mi + i) * nb + e] as f64;
                        if nu == 0.0 {
                            continue;
                        }
                        let k = b.basis.kernel(e);
                        for a in 0..dj {
                            for bb in 0..dl {
                                let oc = out0 + o * dj + a;
                                let ic = in0 + i * dl + bb;
                                let dst =
                                    &mut w[(oc * c_in + ic) * taps..(oc * c_in + ic + 1) * taps];
                                let src = &k[(a * dl + bb) * taps..(a * dl + bb + 1) * taps];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += nu * s;
                                }
                            }
                        }
                    }
                }
            }
        }
        w.into_iter().map(T::of).collect()
    }

    /// Continuous kernel block between one output and one input subfield.
    pub fn block_coeffs(
        &self,
        j: usize,
        l: usize,
        o: usize,
        i: usize,
    ) -> Option<(Arc<SteerableBasis>, Vec<f64>)> {
        let b = self.blocks.iter().find(|b| b.j == j && b.l == l)?;
        let mi = self.in_type.multiplicity(l);
        let nb = b.basis.len();
        let start = b.offset + (o * mi + i) * nb;
        Some((
            b.basis.clone(),
            self.coeffs[start..start + nb]
                .iter()
                .map(|&v| v as f64)
                .collect(),
        ))
    }

    /// Basis-element count times subfield pairs, i.e. the coefficient count.
    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }
}

/// Steerable convolution: cross-correlation with the assembled kernel, zero
/// padding, stride 1.
pub fn econv_forward<T: Real>(
    layer: &EquivariantLayer,
    input: &FeatureMap<T>,
) -> Result<FeatureMap<T>, SteerError> {
    let expected = layer.in_type.channels();
    if input.channels() != expected {
        return Err(SteerError::ChannelMismatch {
            expected,
            got: input.channels(),
        });
    }
    let w = layer.assemble::<T>();
    Ok(conv3d(
        input,
        &w,
        None,
        layer.out_type.channels(),
        layer.kernel_size(),
    ))
}

/// Gate constant keeping zero vectors finite.
pub const GATE_EPS: f64 = 1e-6;

/// Scalars: ReLU. Order `l > 0` subfields: scaled by
/// `relu(|v| + b) / (|v| + ε)` with one bias `b` per subfield.
pub fn equivariant_nonlinearity<T: Real>(
    field: &mut FeatureMap<T>,
    ty: &FieldType,
    gate_bias: &[f32],
) -> Result<(), SteerError> {
    if field.channels() != ty.channels() {
        return Err(SteerError::ChannelMismatch {
            expected: ty.channels(),
            got: field.channels(),
        });
    }
    if gate_bias.len() != ty.gated_subfields() {
        return Err(SteerError::GateBiasCount {
            expected: ty.gated_subfields(),
            got: gate_bias.len(),
        });
    }
    let v = field.voxels();
    let eps = T::of(GATE_EPS);
    let mut gate = 0;
    for (l, c0) in ty.subfields() {
        if l == 0 {
            for x in field.channel_mut(c0) {
                *x = x.max(T::zero());
            }
            continue;
        }
        let b = T::of(gate_bias[gate] as f64);
        gate += 1;
        let width = 2 * l + 1;
        let data = &mut field.data_mut()[c0 * v..(c0 + width) * v];
        for p in 0..v {
            let mut n2 = T::zero();
            for c in 0..width {
                let x = data[c * v + p];
                n2 = n2 + x * x;
            }
            let n = n2.sqrt();
            let g = (n + b).max(T::zero()) / (n + eps);
            for c in 0..width {
                data[c * v + p] = data[c * v + p] * g;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_input_gives_zero_output() {
        let mut set = BasisSet::new(BasisParams::default());
        let mut layer = EquivariantLayer::new(
            FieldType::scalars(1),
            FieldType::new(vec![1, 1, 1]).unwrap(),
            &mut set,
        )
        .unwrap();
        layer.randomize(&mut ChaCha8Rng::seed_from_u64(0));
        let out = econv_forward(&layer, &FeatureMap::<f64>::zeros([6, 6, 6], 1)).unwrap();
        assert_eq!(out.channels(), 9);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn delta_input_reproduces_single_basis_kernel() {
        let mut set = BasisSet::new(BasisParams::default());
        let mut layer =
            EquivariantLayer::new(FieldType::scalars(1), FieldType::scalars(1), &mut set).unwrap();
        layer.coeffs_mut()[1] = 1.0;
        let n = 9;
        let mut input = FeatureMap::<f64>::zeros([n, n, n], 1);
        input.channel_mut(0)[4 + n * (4 + n * 4)] = 1.0;
        let out = econv_forward(&layer, &input).unwrap();
        let basis = set.get(0, 0).unwrap();
        let k = basis.kernel(1);
        // Cross-correlation flips the kernel; scalar kernels are symmetric.
        for t in 0..125 {
            let off = basis.params().tap_offset(t);
            let (x, y, z) = (4 + off.x as i64, 4 + off.y as i64, 4 + off.z as i64);
            let got = out.channel(0)[(x + n as i64 * (y + n as i64 * z)) as usize];
            assert!((got - k[t]).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let mut set = BasisSet::new(BasisParams::default());
        let layer =
            EquivariantLayer::new(FieldType::scalars(2), FieldType::scalars(1), &mut set).unwrap();
        assert!(econv_forward(&layer, &FeatureMap::<f32>::zeros([5, 5, 5], 1)).is_err());
    }

    #[test]
    fn nonlinearity_cases() {
        let ty = FieldType::new(vec![1, 1]).unwrap();
        let mut f = FeatureMap::<f64>::from_data(
            [2, 1, 1],
            4,
            vec![0.5, -0.5, 0.0, 3.0, 0.0, 0.0, 0.0, 4.0],
        );
        equivariant_nonlinearity(&mut f, &ty, &[0.0]).unwrap();
        assert_eq!(f.channel(0), &[0.5, 0.0]);
        // zero vector stays zero
        assert_eq!(f.data()[2], 0.0);
        assert_eq!(f.data()[4], 0.0);
        // nonzero vector keeps its direction, scaled by |v|/(|v|+eps)
        let g = 5.0 / (5.0 + GATE_EPS);
        assert!((f.data()[3] - 3.0 * g).abs() < 1e-15);
        assert!((f.data()[7] - 4.0 * g).abs() < 1e-15);
        let mut f2 = FeatureMap::<f64>::from_data([1, 1, 1], 4, vec![1.0, 3.0, 0.0, 4.0]);
        equivariant_nonlinearity(&mut f2, &ty, &[-6.0]).unwrap();
        assert_eq!(&f2.data()[1..], &[0.0, 0.0, 0.0]);
        assert!(equivariant_nonlinearity(&mut f2, &ty, &[]).is_err());
    }
}
