use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::GeomError;

/// Tolerance on `RᵀR = I` and `det R = 1`.
pub const ORTHO_TOL: f64 = 1e-12;

/// Rigid map `x ↦ R (x - c) + c + t` in voxel coordinates.
///
/// The pivot `c` is stored explicitly so that translations of transforms
/// sharing a pivot are directly comparable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    center: Vector3<f64>,
}

/// Intrinsic Z-Y-X Euler angles in degrees: `R = Rz(yaw) · Ry(pitch) · Rx(roll)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EulerZyx {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    /// Pitch lies within 1e-6 degrees of ±90°, where yaw and roll are not separable.
    pub gimbal_lock: bool,
}

impl EulerZyx {
    /// Angles about the (x, y, z) axes.
    pub fn per_axis(&self) -> [f64; 3] {
        [self.roll, self.pitch, self.yaw]
    }
}

pub fn rot_x(deg: f64) -> Matrix3<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(deg: f64) -> Matrix3<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(deg: f64) -> Matrix3<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Rotation by `deg` degrees about a (not necessarily unit) axis.
pub fn axis_angle(axis: Vector3<f64>, deg: f64) -> Matrix3<f64> {
    let n = axis.normalize();
    let (s, c) = deg.to_radians().sin_cos();
    let k = Matrix3::new(0.0, -n.z, n.y, n.z, 0.0, -n.x, -n.y, n.x, 0.0);
    Matrix3::identity() + k * s + k * k * (1.0 - c)
}

pub fn euler_zyx_matrix(yaw: f64, pitch: f64, roll: f64) -> Matrix3<f64> {
    rot_z(yaw) * rot_y(pitch) * rot_x(roll)
}

pub fn euler_zyx_from_matrix(r: &Matrix3<f64>) -> EulerZyx {
    let sp = (-r[(2, 0)]).clamp(-1.0, 1.0);
    let pitch = sp.asin().to_degrees();
    let gimbal_lock = (pitch.abs() - 90.0).abs() < 1e-6;
    if gimbal_lock {
        // Only yaw ∓ roll is determined; put everything into yaw.
        let yaw = (-r[(0, 1)]).atan2(r[(1, 1)]).to_degrees();
        EulerZyx {
            yaw,
            pitch,
            roll: 0.0,
            gimbal_lock,
        }
    } else {
        EulerZyx {
            yaw: r[(1, 0)].atan2(r[(0, 0)]).to_degrees(),
            pitch,
            roll: r[(2, 1)].atan2(r[(2, 2)]).to_degrees(),
            gimbal_lock,
        }
    }
}

/// Rotation angle of `r` in degrees, in `[0, 180]`.
pub fn rotation_angle_deg(r: &Matrix3<f64>) -> f64 {
    ((r.trace() - 1.0) / 2.0)
        .clamp(-1.0, 1.0)
        .acos()
        .to_degrees()
}

/// Nearest rotation in Frobenius norm (orthogonal polar factor with det +1).
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut d = Matrix3::identity();
        d[(2, 2)] = -1.0;
        r = u * d * v_t;
    }
    r
}

fn orthogonality_drift(r: &Matrix3<f64>) -> f64 {
    let e = r.transpose() * r - Matrix3::identity();
    e.abs().max().max((r.determinant() - 1.0).abs())
}

impl RigidTransform {
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        center: Vector3<f64>,
    ) -> Result<Self, GeomError> {
        let drift = orthogonality_drift(&rotation);
        if !(drift <= ORTHO_TOL) {
            return Err(GeomError::NotARotation(drift));
        }
        if !(translation.iter().all(|v| v.is_finite()) && center.iter().all(|v| v.is_finite())) {
            return Err(GeomError::NonFiniteTransform);
        }
        Ok(Self {
            rotation,
            translation,
            center,
        })
    }

    /// Like [`RigidTransform::new`] but projects `rotation` onto SO(3) first.
    pub fn new_projected(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        center: Vector3<f64>,
    ) -> Self {
        let rotation = if orthogonality_drift(&rotation) > ORTHO_TOL {
            nearest_rotation(&rotation)
        } else {
            rotation
        };
        Self {
            rotation,
            translation,
            center,
        }
    }

    pub fn identity(center: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            center,
        }
    }

    pub fn from_translation(t: Vector3<f64>, center: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
            center,
        }
    }

    pub fn from_euler_zyx_deg(
        angles: EulerZyxInput,
        t: Vector3<f64>,
        center: Vector3<f64>,
    ) -> Self {
        Self::new_projected(
            euler_zyx_matrix(angles.yaw, angles.pitch, angles.roll),
            t,
            center,
        )
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn center(&self) -> &Vector3<f64> {
        &self.center
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * (p - self.center) + self.center + self.translation
    }

    /// Translation of the equivalent map `x ↦ R x + t'` about the coordinate origin.
    pub fn origin_translation(&self) -> Vector3<f64> {
        self.center + self.translation - self.rotation * self.center
    }

    /// The same map expressed about a different pivot.
    pub fn recentered(&self, center: Vector3<f64>) -> Self {
        let t_origin = self.origin_translation();
        Self {
            rotation: self.rotation,
            translation: t_origin - center + self.rotation * center,
            center,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
            center: self.center,
        }
    }

    /// `a ∘ b`: applies `b`, then `a`. The result pivots about `a`'s center.
    pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
        let r = a.rotation * b.rotation;
        let t_origin = a.rotation * b.origin_translation() + a.origin_translation();
        let c = a.center;
        RigidTransform::new_projected(r, t_origin - c + r * c, c)
    }

    pub fn euler_zyx_deg(&self) -> EulerZyx {
        euler_zyx_from_matrix(&self.rotation)
    }

    pub fn rotation_angle_deg(&self) -> f64 {
        rotation_angle_deg(&self.rotation)
    }

    /// Integer-valued rotation matrix and translation. Warps by such transforms
    /// about an integer or half-integer pivot permute voxels exactly.
    pub fn is_grid_aligned(&self) -> bool {
        self.rotation.iter().all(|v| *v == v.round())
            && self.translation.iter().all(|v| *v == v.round())
    }

    /// Draws Euler angles uniformly in `±rot_range_deg` per axis and a translation
    /// uniformly in `±trans_range_vox` per axis, pivoting about `center`.
    pub fn sample<R: Rng + ?Sized>(
        rot_range_deg: f64,
        trans_range_vox: f64,
        center: Vector3<f64>,
        rng: &mut R,
    ) -> Self {
        let mut uni = |r: f64| {
            if r > 0.0 {
                rng.random_range(-r..=r)
            } else {
                0.0
            }
        };
        let yaw = uni(rot_range_deg);
        let pitch = uni(rot_range_deg);
        let roll = uni(rot_range_deg);
        let t = Vector3::new(
            uni(trans_range_vox),
            uni(trans_range_vox),
            uni(trans_range_vox),
        );
        Self::from_euler_zyx_deg(EulerZyxInput { yaw, pitch, roll }, t, center)
    }

    pub fn to_file(&self) -> TransformFile {
        let e = self.euler_zyx_deg();
        let mut r = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                r[3 * i + j] = self.rotation[(i, j)];
            }
        }
        TransformFile {
            r,
            t: [self.translation.x, self.translation.y, self.translation.z],
            center: [self.center.x, self.center.y, self.center.z],
            euler_zyx_deg: [e.yaw, e.pitch, e.roll],
        }
    }

    pub fn from_file(f: &TransformFile) -> Result<Self, GeomError> {
        let r = Matrix3::from_row_slice(&f.r);
        Self::new(r, Vector3::from(f.t), Vector3::from(f.center))
    }
}

/// Plain Euler triple used as constructor input.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EulerZyxInput {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

/// JSON form of a transform. `euler_zyx_deg` is `[yaw, pitch, roll]` and is
/// informational; `R` is authoritative on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformFile {
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
    pub center: [f64; 3],
    pub euler_zyx_deg: [f64; 3],
}

/// The 24 proper rotations of the cube as signed permutation matrices.
pub fn cube_rotations() -> Vec<Matrix3<f64>> {
    let perms = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    let mut out = Vec::with_capacity(24);
    for p in perms {
        for signs in 0..8u32 {
            let mut m = Matrix3::zeros();
            for (row, &col) in p.iter().enumerate() {
                m[(row, col)] = if signs >> row & 1 == 1 { -1.0 } else { 1.0 };
            }
            if m.determinant() > 0.0 {
                out.push(m);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c() -> Vector3<f64> {
        Vector3::new(15.5, 15.5, 15.5)
    }

    fn random_transform(rng: &mut ChaCha8Rng) -> RigidTransform {
        RigidTransform::sample(180.0, 20.0, c(), rng)
    }

    fn max_diff(a: &RigidTransform, b: &RigidTransform) -> f64 {
        let dr = (a.rotation - b.rotation).abs().max();
        let dt = (a.origin_translation() - b.origin_translation())
            .abs()
            .max();
        dr.max(dt)
    }

    #[test]
    fn compose_with_identity_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_transform(&mut rng);
        let id = RigidTransform::identity(c());
        assert!(max_diff(&RigidTransform::compose(&t, &id), &t) < 1e-12);
        assert!(max_diff(&RigidTransform::compose(&t, &t.inverse()), &id) < 1e-12);
    }

    #[test]
    fn compose_z_rotations_adds_angles() {
        let a = RigidTransform::new(rot_z(30.0), Vector3::zeros(), c()).unwrap();
        let b = RigidTransform::new(rot_z(60.0), Vector3::zeros(), c()).unwrap();
        let ab = RigidTransform::compose(&a, &b);
        // Explicit product of the two matrices: cos 90° = 0, sin 90° = 1.
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((ab.rotation - expected).abs().max() < 1e-12);
    }

    #[test]
    fn compose_applies_right_operand_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_transform(&mut rng);
        let b = random_transform(&mut rng);
        let p = Vector3::new(1.0, -2.0, 3.5);
        let ab = RigidTransform::compose(&a, &b);
        assert_abs_diff_eq!(
            (ab.apply(&p) - a.apply(&b.apply(&p))).norm(),
            0.0,
            epsilon = 1e-11
        );
    }

    #[test]
    fn euler_round_trip() {
        let r = euler_zyx_matrix(40.0, -25.0, 170.0);
        let e = euler_zyx_from_matrix(&r);
        assert_abs_diff_eq!(e.yaw, 40.0, epsilon = 1e-10);
        assert_abs_diff_eq!(e.pitch, -25.0, epsilon = 1e-10);
        assert_abs_diff_eq!(e.roll, 170.0, epsilon = 1e-10);
        assert!(!e.gimbal_lock);
        assert!(euler_zyx_from_matrix(&rot_y(90.0)).gimbal_lock);
    }

    #[test]
    fn rejects_non_rotations() {
        let mut m = Matrix3::identity();
        m[(2, 2)] = -1.0;
        assert!(RigidTransform::new(m, Vector3::zeros(), c()).is_err());
        assert!(RigidTransform::new(m * 1.001, Vector3::zeros(), c()).is_err());
    }

    #[test]
    fn zero_ranges_sample_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = RigidTransform::sample(0.0, 0.0, c(), &mut rng);
        assert_eq!(t, RigidTransform::identity(c()));
    }

    #[test]
    fn cube_group_has_24_distinct_rotations() {
        let g = cube_rotations();
        assert_eq!(g.len(), 24);
        for (i, a) in g.iter().enumerate() {
            assert_abs_diff_eq!(a.determinant(), 1.0);
            for b in &g[i + 1..] {
                assert!((a - b).abs().max() > 0.5);
            }
        }
    }

    #[test]
    fn file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random_transform(&mut rng);
        let json = serde_json::to_string(&t.to_file()).unwrap();
        assert!(json.contains("\"R\""));
        let back = RigidTransform::from_file(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, t);
    }
}
