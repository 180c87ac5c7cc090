//! Invariant suites behind the `verify` command.

use nalgebra::{DMatrix, Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::closedform::{solve_rigid_points, TranslationForm};
use crate::geom3d::RigidTransform;
use crate::so3rep::{cg_change_of_basis, real_sh, IrrepTable, L_MAX};
use crate::steerable::{steerability_check, BasisParams, SteerableBasis, MAX_FIELD_ORDER};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyRow {
    pub suite: String,
    pub check: String,
    /// Largest residual seen.
    pub worst: f64,
    pub tolerance: f64,
}

impl VerifyRow {
    fn new(suite: &str, check: &str, worst: f64, tolerance: f64) -> Self {
        Self {
            suite: suite.into(),
            check: check.into(),
            worst,
            tolerance,
        }
    }

    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

/// Uniformly distributed rotation (normalized Gaussian quaternion).
pub fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
    let q = loop {
        let q = Quaternion::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        if q.norm() > 1e-6 {
            break q;
        }
    };
    UnitQuaternion::from_quaternion(q)
        .to_rotation_matrix()
        .into_inner()
}

/// Uniformly distributed unit vector.
pub fn random_unit(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        if v.norm() > 1e-6 {
            return v.normalize();
        }
    }
}

/// Homomorphism, orthogonality and defining-relation residuals for `l ≤ L_MAX`,
/// and block-diagonalization residuals of every product `j ⊗ l` with `j, l ≤ 2`.
pub fn verify_so3(rotations: usize, seed: u64) -> Vec<VerifyRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = IrrepTable::global();
    let (mut hom, mut orth, mut defn) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..rotations {
        let r1 = random_rotation(&mut rng);
        let r2 = random_rotation(&mut rng);
        let u = random_unit(&mut rng);
        for l in 0..=L_MAX {
            let d1 = table.wigner_d(l, &r1);
            let d2 = table.wigner_d(l, &r2);
            let d12 = table.wigner_d(l, &(r1 * r2));
            hom = hom.max((d12 - &d1 * &d2).abs().max());
            orth = orth.max(
                (d1.transpose() * &d1 - DMatrix::identity(2 * l + 1, 2 * l + 1))
                    .abs()
                    .max(),
            );
            let lhs = DMatrix::from_vec(2 * l + 1, 1, real_sh(l, &(r1 * u)).expect("unit"));
            let rhs = &d1 * DMatrix::from_vec(2 * l + 1, 1, real_sh(l, &u).expect("unit"));
            defn = defn.max((lhs - rhs).abs().max());
        }
    }
    let mut cg = 0.0f64;
    for j in 0..=MAX_FIELD_ORDER {
        for l in 0..=MAX_FIELD_ORDER {
            let basis = cg_change_of_basis(l, j).expect("orders within range");
            for _ in 0..rotations.min(20) {
                cg = cg.max(basis.residual(table, &random_rotation(&mut rng)));
            }
        }
    }
    vec![
        VerifyRow::new("so3rep", "homomorphism", hom, 1e-9),
        VerifyRow::new("so3rep", "orthogonality", orth, 1e-9),
        VerifyRow::new("so3rep", "defining relation", defn, 1e-9),
        VerifyRow::new("so3rep", "product block-diagonalization", cg, 1e-10),
    ]
}

/// Continuous steerability of every `(l, j)` basis with `l, j ≤ 2`.
pub fn verify_steerable(rotations: usize, points: usize, seed: u64) -> Vec<VerifyRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = BasisParams::default();
    let samples: Vec<Vector3<f64>> = (0..points)
        .map(|_| random_unit(&mut rng) * rng.random_range(0.0..params.cutoff()))
        .collect();
    let rots: Vec<Matrix3<f64>> = (0..rotations).map(|_| random_rotation(&mut rng)).collect();
    let mut rows = Vec::new();
    for l in 0..=MAX_FIELD_ORDER {
        for j in 0..=MAX_FIELD_ORDER {
            let basis = SteerableBasis::build(l, j, params).expect("orders within range");
            let worst = rots
                .iter()
                .map(|r| steerability_check(&basis, r, &samples))
                .fold(0.0, f64::max);
            rows.push(VerifyRow::new(
                "steerable",
                &format!("kernel steerability l={l} j={j}"),
                worst,
                1e-9,
            ));
        }
    }
    rows
}

/// Exact recovery of random rigid motions from consistent clouds.
pub fn verify_closedform(trials: usize, seed: u64) -> Result<Vec<VerifyRow>, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut rot, mut trans) = (0.0f64, 0.0f64);
    let mut det = 0.0f64;
    for _ in 0..trials {
        let xf: Vec<Vector3<f64>> = (0..64)
            .map(|_| {
                Vector3::new(
                    rng.random_range(0.0..64.0),
                    rng.random_range(0.0..64.0),
                    rng.random_range(0.0..64.0),
                )
            })
            .collect();
        let t = Vector3::new(
            rng.random_range(-20.0..20.0),
            rng.random_range(-20.0..20.0),
            rng.random_range(-20.0..20.0),
        );
        let truth = RigidTransform::new_projected(random_rotation(&mut rng), t, Vector3::zeros());
        let xm: Vec<_> = xf.iter().map(|p| truth.apply(p)).collect();
        let w: Vec<f64> = vec![1.0 / 64.0; 64];
        let est = solve_rigid_points(&xf, &xm, &w, TranslationForm::Full)?;
        rot = rot.max((est.rotation() - truth.rotation()).norm());
        trans = trans.max((est.translation() - truth.translation()).abs().max());
        det = det.max((est.rotation().determinant() - 1.0).abs());
    }
    Ok(vec![
        VerifyRow::new("closedform", "rotation recovery (Frobenius)", rot, 1e-8),
        VerifyRow::new("closedform", "translation recovery (max abs)", trans, 1e-8),
        VerifyRow::new("closedform", "det R - 1", det, 1e-12),
    ])
}
