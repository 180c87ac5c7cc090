//! Weighted centers of mass of feature channels and the closed-form rigid
//! alignment between two such point clouds.

use std::io::{Read, Write};

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conv::{FeatureMap, Real};
use crate::geom3d::{grid_center, RigidTransform};

/// Channels with total |activation| below this carry no weight.
pub const EPS_MASS: f64 = 1e-8;

/// Relative size of the second singular value below which the geometry is
/// treated as rank deficient.
pub const RANK_TOL: f64 = 1e-9;

const WEIGHT_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ClosedFormError {
    #[error("every feature channel has mass below {EPS_MASS:e}")]
    DeadFeatures,
    #[error("point clouds differ in size: {0} vs {1}")]
    SizeMismatch(usize, usize),
    #[error("no channel has nonzero weight in both images")]
    NoInformativeChannel,
    #[error("need at least 3 points with nonzero weight, got {0}")]
    TooFewPoints(usize),
    #[error("weighted points are degenerate: cross-covariance has rank {rank}")]
    Degenerate { rank: usize },
    #[error("invalid point cloud: {0}")]
    Invalid(&'static str),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Centers of mass `x_k`, normalized weights `w_k` and raw masses `w̃_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedPointCloud {
    points: Vec<Vector3<f64>>,
    weights: Vec<f64>,
    mass: Vec<f64>,
}

impl WeightedPointCloud {
    pub fn new(
        points: Vec<Vector3<f64>>,
        weights: Vec<f64>,
        mass: Vec<f64>,
    ) -> Result<Self, ClosedFormError> {
        if points.len() != weights.len() || points.len() != mass.len() {
            return Err(ClosedFormError::Invalid(
                "points, weights and masses differ in length",
            ));
        }
        if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(ClosedFormError::Invalid("non-finite point"));
        }
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(ClosedFormError::Invalid("weights must be nonnegative"));
        }
        if (weights.iter().sum::<f64>() - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(ClosedFormError::Invalid("weights must sum to 1"));
        }
        Ok(Self {
            points,
            weights,
            mass,
        })
    }

    /// Cloud with uniform weights and unit masses.
    pub fn uniform(points: Vec<Vector3<f64>>) -> Result<Self, ClosedFormError> {
        let k = points.len();
        if k == 0 {
            return Err(ClosedFormError::TooFewPoints(0));
        }
        Self::new(points, vec![1.0 / k as f64; k], vec![1.0; k])
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    /// Applies `t` to every point, keeping weights.
    pub fn transformed(&self, t: &RigidTransform) -> Self {
        Self {
            points: self.points.iter().map(|p| t.apply(p)).collect(),
            weights: self.weights.clone(),
            mass: self.mass.clone(),
        }
    }

    /// Rows `k,x,y,z,weight,mass`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), ClosedFormError> {
        let mut out = csv::Writer::from_writer(w);
        for (k, ((p, w), m)) in self
            .points
            .iter()
            .zip(&self.weights)
            .zip(&self.mass)
            .enumerate()
        {
            out.serialize(CsvRow {
                k,
                x: p.x,
                y: p.y,
                z: p.z,
                weight: *w,
                mass: *m,
            })?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, ClosedFormError> {
        let mut rows: Vec<CsvRow> = csv::Reader::from_reader(r)
            .deserialize()
            .collect::<Result<_, _>>()?;
        rows.sort_by_key(|r| r.k);
        Self::new(
            rows.iter().map(|r| Vector3::new(r.x, r.y, r.z)).collect(),
            rows.iter().map(|r| r.weight).collect(),
            rows.iter().map(|r| r.mass).collect(),
        )
    }
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    k: usize,
    x: f64,
    y: f64,
    z: f64,
    weight: f64,
    mass: f64,
}

/// Per channel, the |activation|-weighted mean voxel position and its mass.
/// Dead channels sit at the grid center with zero weight.
pub fn centers_of_mass<T: Real>(
    features: &FeatureMap<T>,
) -> Result<WeightedPointCloud, ClosedFormError> {
    let [nx, ny, _] = features.dims();
    let center = grid_center(features.dims());
    let mut points = Vec::with_capacity(features.channels());
    let mut mass = Vec::with_capacity(features.channels());
    for c in 0..features.channels() {
        let mut m = 0.0;
        let mut s = Vector3::zeros();
        for (i, v) in features.channel(c).iter().enumerate() {
            let a = v.f64().abs();
            if a == 0.0 {
                continue;
            }
            let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
            m += a;
            s += Vector3::new(x as f64, y as f64, z as f64) * a;
        }
        if m < EPS_MASS {
            points.push(center);
            mass.push(m);
        } else {
            points.push(s / m);
            mass.push(m);
        }
    }
    let live: f64 = mass.iter().filter(|&&m| m >= EPS_MASS).sum();
    if live == 0.0 {
        return Err(ClosedFormError::DeadFeatures);
    }
    let weights = mass
        .iter()
        .map(|&m| if m >= EPS_MASS { m / live } else { 0.0 })
        .collect();
    WeightedPointCloud::new(points, weights, mass)
}

/// `w_k ∝ w^f_k · w^m_k`, summing to 1.
pub fn combine_weights(wf: &[f64], wm: &[f64]) -> Result<Vec<f64>, ClosedFormError> {
    if wf.len() != wm.len() {
        return Err(ClosedFormError::SizeMismatch(wf.len(), wm.len()));
    }
    let prod: Vec<f64> = wf.iter().zip(wm).map(|(a, b)| a * b).collect();
    let total: f64 = prod.iter().sum();
    if !(total > 0.0) {
        return Err(ClosedFormError::NoInformativeChannel);
    }
    Ok(prod.into_iter().map(|p| p / total).collect())
}

/// How the translation is recovered once the rotation is known.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranslationForm {
    /// `t = x̄^m − R x̄^f`, the least-squares optimum.
    #[default]
    Full,
    /// `t = x̄^m − x̄^f`, exact only when the fixed centroid is the pivot.
    CentroidDifference,
}

fn weighted_mean(points: &[Vector3<f64>], w: &[f64]) -> Vector3<f64> {
    points
        .iter()
        .zip(w)
        .map(|(p, &wk)| p * wk)
        .sum::<Vector3<f64>>()
        / w.iter().sum::<f64>()
}

/// Minimizer of `Σ w_k ‖x^m_k − T x^f_k‖²` over rigid `T`, pivoting at the origin.
pub fn solve_rigid_points(
    xf: &[Vector3<f64>],
    xm: &[Vector3<f64>],
    w: &[f64],
    form: TranslationForm,
) -> Result<RigidTransform, ClosedFormError> {
    if xf.len() != xm.len() || xf.len() != w.len() {
        return Err(ClosedFormError::SizeMismatch(xf.len(), xm.len()));
    }
    let live = w.iter().filter(|&&v| v > 0.0).count();
    if live < 3 {
        return Err(ClosedFormError::TooFewPoints(live));
    }
    let cf = weighted_mean(xf, w);
    let cm = weighted_mean(xm, w);
    let mut sigma = Matrix3::zeros();
    for ((pf, pm), &wk) in xf.iter().zip(xm).zip(w) {
        sigma += (pm - cm) * (pf - cf).transpose() * wk;
    }
    let svd = sigma.svd(true, true);
    let s = svd.singular_values;
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let rank = s.iter().filter(|&&v| v > RANK_TOL * s[order[0]]).count();
    if !(s[order[0]] > 0.0) || s[order[1]] < RANK_TOL * s[order[0]] {
        return Err(ClosedFormError::Degenerate {
            rank: if s[order[0]] > 0.0 { rank } else { 0 },
        });
    }
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(order[2], order[2])] = -1.0;
    }
    let r = u * d * v_t;
    let t = match form {
        TranslationForm::Full => cm - r * cf,
        TranslationForm::CentroidDifference => cm - cf,
    };
    Ok(RigidTransform::new_projected(r, t, Vector3::zeros()))
}

/// Aligns `fixed` onto `moving` with the product weights of the two clouds.
pub fn solve_rigid(
    fixed: &WeightedPointCloud,
    moving: &WeightedPointCloud,
) -> Result<RigidTransform, ClosedFormError> {
    solve_rigid_with(fixed, moving, TranslationForm::Full)
}

pub fn solve_rigid_with(
    fixed: &WeightedPointCloud,
    moving: &WeightedPointCloud,
    form: TranslationForm,
) -> Result<RigidTransform, ClosedFormError> {
    let w = combine_weights(&fixed.weights, &moving.weights)?;
    solve_rigid_points(&fixed.points, &moving.points, &w, form)
}

/// Unweighted least-squares alignment through the unit-quaternion
/// eigenproblem. Shares no code with the SVD path.
pub fn solve_rigid_unweighted(
    xf: &[Vector3<f64>],
    xm: &[Vector3<f64>],
) -> Result<RigidTransform, ClosedFormError> {
    if xf.len() != xm.len() {
        return Err(ClosedFormError::SizeMismatch(xf.len(), xm.len()));
    }
    if xf.len() < 3 {
        return Err(ClosedFormError::TooFewPoints(xf.len()));
    }
    let n = xf.len() as f64;
    let cf = xf.iter().sum::<Vector3<f64>>() / n;
    let cm = xm.iter().sum::<Vector3<f64>>() / n;
    // s[a][b] = Σ (x^f − c^f)_a (x^m − c^m)_b
    let mut s = Matrix3::zeros();
    for (pf, pm) in xf.iter().zip(xm) {
        s += (pf - cf) * (pm - cm).transpose();
    }
    let (sxx, sxy, sxz) = (s[(0, 0)], s[(0, 1)], s[(0, 2)]);
    let (syx, syy, syz) = (s[(1, 0)], s[(1, 1)], s[(1, 2)]);
    let (szx, szy, szz) = (s[(2, 0)], s[(2, 1)], s[(2, 2)]);
    #[rustfmt::skip]
    let nmat = Matrix4::new(
        sxx + syy + szz, syz - szy,        szx - sxz,        sxy - syx,
        syz - szy,       sxx - syy - szz,  sxy + syx,        szx + sxz,
        szx - sxz,       sxy + syx,        -sxx + syy - szz, syz + szy,
        sxy - syx,       szx + sxz,        syz + szy,        -sxx - syy + szz,
    );
    let eig = nmat.symmetric_eigen();
    let mut idx = [0, 1, 2, 3];
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let scale = eig.eigenvalues.abs().max();
    if !(scale > 0.0) || eig.eigenvalues[idx[0]] - eig.eigenvalues[idx[1]] < RANK_TOL * scale {
        return Err(ClosedFormError::Degenerate { rank: 1 });
    }
    let q = eig.eigenvectors.column(idx[0]).normalize();
    let (q0, qx, qy, qz) = (q[0], q[1], q[2], q[3]);
    #[rustfmt::skip]
    let r = Matrix3::new(
        q0 * q0 + qx * qx - qy * qy - qz * qz, 2.0 * (qx * qy - q0 * qz),             2.0 * (qx * qz + q0 * qy),
        2.0 * (qy * qx + q0 * qz),             q0 * q0 - qx * qx + qy * qy - qz * qz, 2.0 * (qy * qz - q0 * qx),
        2.0 * (qz * qx - q0 * qy),             2.0 * (qz * qy + q0 * qx),             q0 * q0 - qx * qx - qy * qy + qz * qz,
    );
    Ok(RigidTransform::new_projected(
        r,
        cm - r * cf,
        Vector3::zeros(),
    ))
}

/// `Σ w_k ‖x^m_k − T x^f_k‖²` with the product weights.
pub fn objective(
    t: &RigidTransform,
    fixed: &WeightedPointCloud,
    moving: &WeightedPointCloud,
) -> Result<f64, ClosedFormError> {
    let w = combine_weights(&fixed.weights, &moving.weights)?;
    Ok(objective_points(t, &fixed.points, &moving.points, &w))
}

pub fn objective_points(
    t: &RigidTransform,
    xf: &[Vector3<f64>],
    xm: &[Vector3<f64>],
    w: &[f64],
) -> f64 {
    xf.iter()
        .zip(xm)
        .zip(w)
        .map(|((pf, pm), &wk)| wk * (pm - t.apply(pf)).norm_squared())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom3d::axis_angle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(rng: &mut impl Rng, k: usize) -> Vec<Vector3<f64>> {
        (0..k)
            .map(|_| {
                Vector3::new(
                    rng.random_range(0.0..32.0),
                    rng.random_range(0.0..32.0),
                    rng.random_range(0.0..32.0),
                )
            })
            .collect()
    }

    fn random_transform(rng: &mut impl Rng) -> RigidTransform {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let r = axis_angle(axis, rng.random_range(0.0..180.0));
        let t = Vector3::new(
            rng.random_range(-20.0..20.0),
            rng.random_range(-20.0..20.0),
            rng.random_range(-20.0..20.0),
        );
        RigidTransform::new_projected(r, t, Vector3::new(15.5, 15.5, 15.5))
    }

    #[test]
    fn delta_channel_sits_at_its_voxel() {
        let mut f = FeatureMap::<f64>::zeros([5, 6, 7], 1);
        f.channel_mut(0)[2 + 5 * (3 + 6 * 4)] = 1.0;
        let c = centers_of_mass(&f).unwrap();
        assert_eq!(c.points()[0], Vector3::new(2.0, 3.0, 4.0));
        assert_eq!(c.weights(), &[1.0]);
    }

    #[test]
    fn symmetric_blob_sits_at_grid_center() {
        let n = 9;
        let mut f = FeatureMap::<f32>::zeros([n, n, n], 1);
        for (i, v) in f.channel_mut(0).iter_mut().enumerate() {
            let p = Vector3::new((i % n) as f64, ((i / n) % n) as f64, (i / (n * n)) as f64)
                - Vector3::repeat(4.0);
            *v = (-p.norm_squared() / 4.0).exp() as f32;
        }
        let c = centers_of_mass(&f).unwrap();
        assert!((c.points()[0] - Vector3::repeat(4.0)).norm() < 1e-6);
    }

    #[test]
    fn masses_normalize_and_dead_channels_drop_out() {
        let mut f = FeatureMap::<f64>::zeros([4, 4, 4], 3);
        f.channel_mut(0)[5] = 3.0;
        f.channel_mut(1)[9] = -1.0;
        let c = centers_of_mass(&f).unwrap();
        assert_eq!(c.weights(), &[0.75, 0.25, 0.0]);
        assert_eq!(c.points()[2], Vector3::repeat(1.5));
        assert!(matches!(
            centers_of_mass(&FeatureMap::<f64>::zeros([4, 4, 4], 2)),
            Err(ClosedFormError::DeadFeatures)
        ));
    }

    #[test]
    fn combined_weights() {
        let w = combine_weights(&[0.5, 0.5], &[0.8, 0.2]).unwrap();
        assert!((w[0] - 0.8).abs() < 1e-15 && (w[1] - 0.2).abs() < 1e-15);
        assert_eq!(
            combine_weights(&[1.0, 0.0], &[1.0, 0.0]).unwrap(),
            vec![1.0, 0.0]
        );
        assert!(combine_weights(&[1.0, 0.0], &[0.0, 1.0]).is_err());
        assert!(combine_weights(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn identity_on_equal_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = WeightedPointCloud::uniform(random_cloud(&mut rng, 10)).unwrap();
        let t = solve_rigid(&a, &a).unwrap();
        assert!((t.rotation() - Matrix3::identity()).abs().max() < 1e-12);
        assert!(t.translation().abs().max() < 1e-12);
    }

    #[test]
    fn recovers_exact_rigid_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let xf = random_cloud(&mut rng, 64);
            let truth = random_transform(&mut rng);
            let xm: Vec<_> = xf.iter().map(|p| truth.apply(p)).collect();
            let w: Vec<f64> = (0..64).map(|_| rng.random_range(0.1..1.0)).collect();
            let total: f64 = w.iter().sum();
            let w: Vec<f64> = w.iter().map(|v| v / total).collect();
            let est = solve_rigid_points(&xf, &xm, &w, TranslationForm::Full)
                .unwrap()
                .recentered(*truth.center());
            assert!((est.rotation() - truth.rotation()).norm() < 1e-8);
            assert!((est.translation() - truth.translation()).abs().max() < 1e-8);
        }
    }

    #[test]
    fn quaternion_and_svd_routes_agree_on_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let xf = random_cloud(&mut rng, 12);
            let truth = random_transform(&mut rng);
            let xm: Vec<_> = xf
                .iter()
                .map(|p| {
                    truth.apply(p)
                        + Vector3::new(
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                            0.0,
                        )
                })
                .collect();
            let a = solve_rigid_points(&xf, &xm, &[1.0 / 12.0; 12], TranslationForm::Full).unwrap();
            let b = solve_rigid_unweighted(&xf, &xm).unwrap();
            assert!((a.rotation() - b.rotation()).abs().max() < 1e-10);
            assert!((a.translation() - b.translation()).abs().max() < 1e-10);
        }
    }

    #[test]
    fn centroid_difference_form_ignores_rotation() {
        let xf = vec![
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 2.0, 0.0),
            Vector3::new(0.0, 0.0, 3.0),
        ];
        let rot = RigidTransform::new_projected(
            axis_angle(Vector3::z(), 90.0),
            Vector3::zeros(),
            Vector3::zeros(),
        );
        let xm: Vec<_> = xf.iter().map(|p| rot.apply(p)).collect();
        let w = [1.0 / 3.0; 3];
        let simple = solve_rigid_points(&xf, &xm, &w, TranslationForm::CentroidDifference).unwrap();
        let cf = weighted_mean(&xf, &w);
        let cm = weighted_mean(&xm, &w);
        assert!((simple.translation() - (cm - cf)).norm() < 1e-12);
        let full = solve_rigid_points(&xf, &xm, &w, TranslationForm::Full).unwrap();
        assert!(full.translation().norm() < 1e-12);
    }

    #[test]
    fn degenerate_geometry_is_reported() {
        let line: Vec<_> = (0..5)
            .map(|i| Vector3::new(i as f64, 2.0 * i as f64, 0.0))
            .collect();
        let w = [0.2; 5];
        assert!(matches!(
            solve_rigid_points(&line, &line, &w, TranslationForm::Full),
            Err(ClosedFormError::Degenerate { rank: 1 })
        ));
        let same = vec![Vector3::repeat(1.0); 4];
        assert!(matches!(
            solve_rigid_points(&same, &same, &[0.25; 4], TranslationForm::Full),
            Err(ClosedFormError::Degenerate { rank: 0 })
        ));
        let few = [Vector3::x(), Vector3::y(), Vector3::z()];
        assert!(matches!(
            solve_rigid_points(&few, &few, &[0.5, 0.5, 0.0], TranslationForm::Full),
            Err(ClosedFormError::TooFewPoints(2))
        ));
    }

    #[test]
    fn objective_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xf = random_cloud(&mut rng, 8);
        let truth = random_transform(&mut rng);
        let f = WeightedPointCloud::uniform(xf.clone()).unwrap();
        let m = f.transformed(&truth);
        assert!(objective(&truth, &f, &m).unwrap() < 1e-18);
        let shift = Vector3::new(1.0, -2.0, 0.5);
        let moved = WeightedPointCloud::uniform(xf.iter().map(|p| p + shift).collect()).unwrap();
        let id = RigidTransform::identity(Vector3::zeros());
        assert!((objective(&id, &f, &moved).unwrap() - shift.norm_squared()).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = WeightedPointCloud::new(
            random_cloud(&mut rng, 3),
            vec![0.5, 0.25, 0.25],
            vec![2.0, 1.0, 1.0],
        )
        .unwrap();
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("k,x,y,z,weight,mass\n"));
        assert_eq!(WeightedPointCloud::read_csv(&buf[..]).unwrap(), c);
    }

    #[test]
    fn rejects_bad_clouds() {
        assert!(WeightedPointCloud::new(vec![Vector3::zeros()], vec![0.5], vec![1.0]).is_err());
        assert!(
            WeightedPointCloud::new(vec![Vector3::repeat(f64::NAN)], vec![1.0], vec![1.0]).is_err()
        );
        assert!(
            WeightedPointCloud::new(vec![Vector3::zeros(); 2], vec![1.5, -0.5], vec![1.0; 2])
                .is_err()
        );
    }
}
