use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::SteerError;
use crate::so3rep::{cg_change_of_basis, real_sh_into, IrrepTable};

/// Radial and sampling parameters shared by every basis of a network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisParams {
    /// Odd kernel side length.
    pub size: usize,
    /// Number of radial shells, centered at radii `0..shells`.
    pub shells: usize,
    /// Width of each radial shell.
    pub sigma: f64,
    /// Gaussian applied to the sampled kernels; 0 disables it.
    pub blur: f64,
}

impl Default for BasisParams {
    fn default() -> Self {
        Self {
            size: 5,
            shells: 3,
            sigma: 0.6,
            blur: 0.5,
        }
    }
}

impl BasisParams {
    fn validate(&self) -> Result<(), SteerError> {
        if self.size % 2 == 0 || self.size == 0 {
            return Err(SteerError::BadBasis("kernel size must be odd"));
        }
        if self.shells == 0 {
            return Err(SteerError::BadBasis("need at least one radial shell"));
        }
        if !(self.sigma > 0.0) || !(self.blur >= 0.0) {
            return Err(SteerError::BadBasis(
                "radial width must be positive, blur nonnegative",
            ));
        }
        Ok(())
    }

    pub fn cutoff(&self) -> f64 {
        self.size as f64 / 2.0
    }

    pub fn taps(&self) -> usize {
        self.size.pow(3)
    }

    /// Integer offset of tap `t` (x fastest) from the kernel center.
    pub fn tap_offset(&self, t: usize) -> Vector3<f64> {
        let s = self.size;
        let c = (s / 2) as f64;
        Vector3::new(
            (t % s) as f64 - c,
            ((t / s) % s) as f64 - c,
            (t / (s * s)) as f64 - c,
        )
    }
}

/// Kernel basis mapping an order-`l` input subfield to an order-`j` output subfield.
///
/// Element `(J, m)` is the continuous kernel
/// `κ(x)[a, b] = ρ_m(|x|) Σ_M C_J[M, a(2l+1) + b] S^J_M(x/|x|)`, where `ρ_m` is
/// a Gaussian shell of radius `m`, `C_J` is the order-`J` block of the
/// tensor-product change of basis and `S^J` are real harmonics. Kernels are
/// sampled on the integer grid, scaled to unit Frobenius norm, blurred by a
/// separable Gaussian truncated to the window, and clipped to the support
/// ball again. They are stored as `[a][b][tap]`.
#[derive(Debug, Clone)]
pub struct SteerableBasis {
    pub l: usize,
    pub j: usize,
    params: BasisParams,
    elements: Vec<(usize, usize)>,
    blocks: Vec<DMatrix<f64>>,
    kernels: Vec<Vec<f64>>,
}

impl SteerableBasis {
    pub fn build(l: usize, j: usize, params: BasisParams) -> Result<Self, SteerError> {
        params.validate()?;
        let cg = cg_change_of_basis(l, j)?;
        let mut elements = Vec::new();
        let mut blocks = Vec::new();
        for order in cg.orders() {
            for m in 0..params.shells {
                elements.push((order, m));
                blocks.push(cg.block(order).clone());
            }
        }
        let mut basis = Self {
            l,
            j,
            params,
            elements,
            blocks,
            kernels: Vec::new(),
        };
        basis.kernels = (0..basis.len()).map(|e| basis.sample(e)).collect();
        Ok(basis)
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn params(&self) -> &BasisParams {
        &self.params
    }

    /// `(J, m)` of each element.
    pub fn elements(&self) -> &[(usize, usize)] {
        &self.elements
    }

    /// Sampled kernel of element `e`, laid out `[a][b][tap]`.
    pub fn kernel(&self, e: usize) -> &[f64] {
        &self.kernels[e]
    }

    pub fn block_shape(&self) -> (usize, usize) {
        (2 * self.j + 1, 2 * self.l + 1)
    }

    fn radial(&self, m: usize, r: f64) -> f64 {
        if r > self.params.cutoff() {
            return 0.0;
        }
        let d = r - m as f64;
        (-d * d / (2.0 * self.params.sigma * self.params.sigma)).exp()
    }

    /// Continuous kernel of element `e` at `x`, a `(2j+1) × (2l+1)` matrix.
    pub fn eval(&self, e: usize, x: &Vector3<f64>) -> DMatrix<f64> {
        let (order, m) = self.elements[e];
        let (rows, cols) = self.block_shape();
        let r = x.norm();
        let mut out = DMatrix::zeros(rows, cols);
        let rad = self.radial(m, r);
        if rad == 0.0 || (r == 0.0 && order > 0) {
            return out;
        }
        let mut sh = vec![0.0; 2 * order + 1];
        if r == 0.0 {
            real_sh_into(0, 0.0, 0.0, 1.0, &mut sh);
        } else {
            real_sh_into(order, x.x / r, x.y / r, x.z / r, &mut sh);
        }
        let block = &self.blocks[e];
        for a in 0..rows {
            for b in 0..cols {
                let col = a * cols + b;
                let v: f64 = (0..sh.len()).map(|mm| block[(mm, col)] * sh[mm]).sum();
                out[(a, b)] = rad * v;
            }
        }
        out
    }

    fn sample(&self, e: usize) -> Vec<f64> {
        let p = &self.params;
        let taps = p.taps();
        let (rows, cols) = self.block_shape();
        let mut k = vec![0.0; rows * cols * taps];
        for t in 0..taps {
            let v = self.eval(e, &p.tap_offset(t));
            for a in 0..rows {
                for b in 0..cols {
                    k[(a * cols + b) * taps + t] = v[(a, b)];
                }
            }
        }
        let clip = |k: &mut [f64]| {
            for t in 0..taps {
                if p.tap_offset(t).norm() > p.cutoff() {
                    for entry in k.chunks_mut(taps) {
                        entry[t] = 0.0;
                    }
                }
            }
        };
        // Normalizing before the blur lets it attenuate elements the grid cannot
        // resolve instead of rescaling their aliased remainder back up.
        let norm = k.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            k.iter_mut().for_each(|v| *v /= norm);
        }
        if p.blur > 0.0 {
            for entry in k.chunks_mut(taps) {
                blur_window(entry, p.size, p.blur);
            }
            clip(&mut k);
        }
        k
    }

    /// Sums `coeffs[e] · κ_e(x)` over elements on the continuous kernels.
    pub fn eval_combination(&self, coeffs: &[f64], x: &Vector3<f64>) -> DMatrix<f64> {
        assert_eq!(coeffs.len(), self.len());
        let (rows, cols) = self.block_shape();
        let mut out = DMatrix::zeros(rows, cols);
        for (e, &c) in coeffs.iter().enumerate() {
            out += self.eval(e, x) * c;
        }
        out
    }
}

/// Separable Gaussian blur of an `s³` window, zero outside the window.
fn blur_window(k: &mut [f64], s: usize, sigma: f64) {
    let r = s as i64 - 1;
    let w: Vec<f64> = (-r..=r)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    let w: Vec<f64> = w.iter().map(|v| v / total).collect();
    let stride = [1, s, s * s];
    for (axis, &st) in stride.iter().enumerate() {
        let src = k.to_vec();
        for t in 0..k.len() {
            let pos = (t / stride[axis]) % s;
            let mut acc = 0.0;
            for q in 0..s {
                let d = q as i64 - pos as i64;
                acc += w[(d + r) as usize] * src[t - pos * st + q * st];
            }
            k[t] = acc;
        }
    }
}

/// Largest `‖κ(rx) − D_j(r) κ(x) D_l(r)ᵀ‖_∞` over all elements and sample points.
pub fn steerability_check(
    basis: &SteerableBasis,
    r: &Matrix3<f64>,
    samples: &[Vector3<f64>],
) -> f64 {
    let table = IrrepTable::global();
    let dj = table.wigner_d(basis.j, r);
    let dl = table.wigner_d(basis.l, r);
    let mut worst = 0.0f64;
    for e in 0..basis.len() {
        for x in samples {
            let lhs = basis.eval(e, &(r * x));
            let rhs = &dj * basis.eval(e, x) * dl.transpose();
            worst = worst.max((lhs - rhs).abs().max());
        }
    }
    worst
}

/// Same residual for one linear combination of the elements.
pub fn steerability_check_combination(
    basis: &SteerableBasis,
    coeffs: &[f64],
    r: &Matrix3<f64>,
    samples: &[Vector3<f64>],
) -> f64 {
    let table = IrrepTable::global();
    let dj = table.wigner_d(basis.j, r);
    let dl = table.wigner_d(basis.l, r);
    samples
        .iter()
        .map(|x| {
            let lhs = basis.eval_combination(coeffs, &(r * x));
            let rhs = &dj * basis.eval_combination(coeffs, x) * dl.transpose();
            (lhs - rhs).abs().max()
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom3d::cube_rotations;

    fn unblurred() -> BasisParams {
        BasisParams {
            blur: 0.0,
            ..BasisParams::default()
        }
    }

    #[test]
    fn element_counts() {
        let p = BasisParams::default();
        assert_eq!(SteerableBasis::build(0, 0, p).unwrap().len(), 3);
        let b = SteerableBasis::build(0, 1, p).unwrap();
        assert_eq!(b.len(), 3);
        assert_eq!(b.block_shape(), (3, 1));
        assert_eq!(SteerableBasis::build(2, 2, p).unwrap().len(), 15);
        assert_eq!(SteerableBasis::build(1, 2, p).unwrap().len(), 9);
    }

    #[test]
    fn scalar_kernels_are_isotropic_before_blur() {
        let p = unblurred();
        let b = SteerableBasis::build(0, 0, p).unwrap();
        for e in 0..b.len() {
            let k = b.kernel(e);
            for t in 0..p.taps() {
                for u in 0..p.taps() {
                    let (rt, ru) = (
                        p.tap_offset(t).norm_squared(),
                        p.tap_offset(u).norm_squared(),
                    );
                    if (rt - ru).abs() < 1e-12 {
                        assert!((k[t] - k[u]).abs() < 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn support_is_clipped_and_center_vanishes_for_nonscalar_orders() {
        let p = BasisParams::default();
        let b = SteerableBasis::build(1, 1, p).unwrap();
        let center = p.taps() / 2;
        let taps = p.taps();
        let mut live = 0;
        for t in 0..taps {
            if p.tap_offset(t).norm() > p.cutoff() {
                for e in 0..b.len() {
                    assert!(b.kernel(e).chunks(taps).all(|c| c[t] == 0.0));
                }
            } else {
                live += 1;
            }
        }
        assert_eq!(live, 81);
        let raw = SteerableBasis::build(1, 1, unblurred()).unwrap();
        for (e, &(order, _)) in raw.elements().iter().enumerate() {
            let at_center = raw
                .kernel(e)
                .chunks(taps)
                .map(|c| c[center].abs())
                .fold(0.0, f64::max);
            if order > 0 {
                assert_eq!(at_center, 0.0);
            }
        }
        for e in 0..b.len() {
            let blurred: f64 = b.kernel(e).iter().map(|v| v * v).sum();
            let sharp: f64 = raw.kernel(e).iter().map(|v| v * v).sum();
            assert!((sharp - 1.0).abs() < 1e-12);
            assert!(blurred < 1.0);
        }
    }

    #[test]
    fn sampled_kernels_commute_with_the_cube_group() {
        let p = BasisParams::default();
        let table = IrrepTable::global();
        let taps = p.taps();
        let s = p.size as i64;
        let c = s / 2;
        for (l, j) in [(0, 1), (1, 1), (2, 1), (2, 2)] {
            let b = SteerableBasis::build(l, j, p).unwrap();
            let (rows, cols) = b.block_shape();
            for g in cube_rotations() {
                let dj = table.wigner_d(j, &g);
                let dl = table.wigner_d(l, &g);
                for e in 0..b.len() {
                    let k = b.kernel(e);
                    for t in 0..taps {
                        let x = p.tap_offset(t);
                        let gx = g * x;
                        let gt = ((gx.x.round() as i64 + c)
                            + s * ((gx.y.round() as i64 + c) + s * (gx.z.round() as i64 + c)))
                            as usize;
                        let at = |tap: usize| {
                            DMatrix::from_fn(rows, cols, |a, bb| k[(a * cols + bb) * taps + tap])
                        };
                        let diff = at(gt) - &dj * at(t) * dl.transpose();
                        assert!(diff.abs().max() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn identity_rotation_has_zero_residual() {
        let b = SteerableBasis::build(2, 1, BasisParams::default()).unwrap();
        let pts = [Vector3::new(0.3, 1.2, -0.7), Vector3::new(-1.5, 0.1, 0.4)];
        assert!(steerability_check(&b, &Matrix3::identity(), &pts) < 1e-14);
    }

    #[test]
    fn rejects_bad_params() {
        let mut p = BasisParams::default();
        p.size = 4;
        assert!(SteerableBasis::build(0, 0, p).is_err());
        p.size = 5;
        p.sigma = 0.0;
        assert!(SteerableBasis::build(0, 0, p).is_err());
    }
}
