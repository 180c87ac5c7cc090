use std::sync::OnceLock;

use nalgebra::{DMatrix, Matrix3, Vector3};

use super::sh::real_sh_into;
use super::{So3Error, L_MAX};

/// Condition number above which a direction set is rejected.
const MAX_CONDITION: f64 = 1e6;

/// Real Wigner-D matrices for orders `0..=l_max`.
///
/// `D_l(r)` is recovered from its defining relation `S_l(r u) = D_l(r) S_l(u)`:
/// harmonics are evaluated on a fixed set of generic directions `U` and on
/// `rU`, and `D_l(r) = S_l(rU) · S_l(U)⁺`. The pseudo-inverse is computed once
/// per order.
#[derive(Debug, Clone)]
pub struct IrrepTable {
    l_max: usize,
    directions: Vec<Vec<Vector3<f64>>>,
    pinv: Vec<DMatrix<f64>>,
    condition: Vec<f64>,
}

/// Fibonacci-lattice directions, tilted by a fixed generic rotation so that no
/// point sits on a coordinate axis.
fn generic_directions(n: usize, tilt: f64) -> Vec<Vector3<f64>> {
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    let tilt_m = crate::geom3d::euler_zyx_matrix(17.0 + tilt, 29.0 + 0.5 * tilt, 41.0 - tilt);
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            (tilt_m * Vector3::new(r * phi.cos(), r * phi.sin(), z)).normalize()
        })
        .collect()
}

fn sh_matrix(l: usize, dirs: &[Vector3<f64>]) -> DMatrix<f64> {
    let d = 2 * l + 1;
    let mut m = DMatrix::zeros(d, dirs.len());
    let mut buf = vec![0.0; d];
    for (k, u) in dirs.iter().enumerate() {
        real_sh_into(l, u.x, u.y, u.z, &mut buf);
        for (i, v) in buf.iter().enumerate() {
            m[(i, k)] = *v;
        }
    }
    m
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    max / min
}

impl IrrepTable {
    pub fn new(l_max: usize) -> Result<Self, So3Error> {
        if l_max > L_MAX {
            return Err(So3Error::OrderTooHigh(l_max));
        }
        let mut directions = Vec::new();
        let mut pinv = Vec::new();
        let mut condition = Vec::new();
        for l in 0..=l_max {
            let n = 2 * (2 * l + 1) + 3;
            let mut accepted = None;
            for attempt in 0..16 {
                let dirs = generic_directions(n, 7.3 * attempt as f64);
                let y = sh_matrix(l, &dirs);
                let cond = condition_number(&y);
                if cond <= MAX_CONDITION {
                    accepted = Some((dirs, y, cond));
                    break;
                }
            }
            let (dirs, y, cond) = accepted.ok_or(So3Error::IllConditioned(l))?;
            // Right pseudo-inverse Yᵀ (Y Yᵀ)⁻¹.
            let yyt = &y * y.transpose();
            let inv = yyt.try_inverse().ok_or(So3Error::IllConditioned(l))?;
            pinv.push(y.transpose() * inv);
            directions.push(dirs);
            condition.push(cond);
        }
        Ok(Self {
            l_max,
            directions,
            pinv,
            condition,
        })
    }

    /// Shared table for orders up to [`L_MAX`].
    pub fn global() -> &'static IrrepTable {
        static TABLE: OnceLock<IrrepTable> = OnceLock::new();
        TABLE.get_or_init(|| IrrepTable::new(L_MAX).expect("irrep table"))
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    /// Condition number of the harmonic sample matrix used for order `l`.
    pub fn condition(&self, l: usize) -> f64 {
        self.condition[l]
    }

    /// `(2l+1) × (2l+1)` real Wigner-D matrix of the rotation `r`.
    pub fn wigner_d(&self, l: usize, r: &Matrix3<f64>) -> DMatrix<f64> {
        assert!(
            l <= self.l_max,
            "order {l} exceeds table l_max {}",
            self.l_max
        );
        if l == 0 {
            return DMatrix::from_element(1, 1, 1.0);
        }
        let rotated: Vec<Vector3<f64>> = self.directions[l].iter().map(|u| r * u).collect();
        sh_matrix(l, &rotated) * &self.pinv[l]
    }

    /// Block-diagonal representation for a field with the given multiplicities per order.
    pub fn field_rep(&self, multiplicities: &[usize], r: &Matrix3<f64>) -> DMatrix<f64> {
        let n: usize = multiplicities
            .iter()
            .enumerate()
            .map(|(l, m)| m * (2 * l + 1))
            .sum();
        let mut out = DMatrix::zeros(n, n);
        let mut off = 0;
        for (l, &mult) in multiplicities.iter().enumerate() {
            if mult == 0 {
                continue;
            }
            let d = self.wigner_d(l, r);
            let k = 2 * l + 1;
            for _ in 0..mult {
                out.view_mut((off, off), (k, k)).copy_from(&d);
                off += k;
            }
        }
        out
    }
}

/// Real Wigner-D matrix from the shared table.
pub fn wigner_d_real(l: usize, r: &Matrix3<f64>) -> Result<DMatrix<f64>, So3Error> {
    if l > L_MAX {
        return Err(So3Error::OrderTooHigh(l));
    }
    Ok(IrrepTable::global().wigner_d(l, r))
}
