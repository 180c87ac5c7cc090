use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::geom3d::{axis_angle, grid_center, Volume3};

/// Rejection budget for asymmetric phantoms.
pub const PHANTOM_TRIES: usize = 50;

/// Width of the cosine falloff outside the mask, voxels.
pub const TAPER_VOX: f64 = 2.0;

/// Semi-axes of the mask ellipsoid as fractions of the side lengths.
const SEMI_AXES: [f64; 3] = [0.32, 0.28, 0.25];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub n_blobs: usize,
    pub seed: u64,
    /// Scales the mask ellipsoid; 1 gives semi-axes of about 0.3 of the field of view.
    pub extent: f64,
}

impl PhantomSpec {
    pub fn new(dims: [usize; 3], n_blobs: usize, seed: u64) -> Self {
        Self {
            dims,
            n_blobs,
            seed,
            extent: 1.0,
        }
    }

    pub fn with_extent(mut self, extent: f64) -> Self {
        self.extent = extent;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: [f64; 3],
    pub sigmas: [f64; 3],
    /// Row-major orientation of the blob axes.
    pub axes: [f64; 9],
    pub amplitude: f64,
}

/// Synthetic volume of Gaussian blobs inside an ellipsoidal mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub image: Volume3,
    pub mask: Volume3,
    pub spec: PhantomSpec,
    pub blobs: Vec<Blob>,
    /// Attempts consumed by the asymmetry rejection.
    pub tries: usize,
}

/// Minimum relative gap between the inertia eigenvalues.
const MIN_EIGEN_GAP: f64 = 0.05;
/// Minimum normalized third moment along every principal axis.
const MIN_SKEW: f64 = 0.05;

pub fn make_phantom(dims: [usize; 3], n_blobs: usize, seed: u64) -> Result<Phantom, HarnessError> {
    make_phantom_with(&PhantomSpec::new(dims, n_blobs, seed))
}

/// Draws blob sets until the image has no symmetry axis: distinct inertia
/// eigenvalues exclude continuous symmetry, and a nonzero third moment along
/// each principal axis excludes half-turn symmetry about it.
pub fn make_phantom_with(spec: &PhantomSpec) -> Result<Phantom, HarnessError> {
    if spec.n_blobs < 3 {
        return Err(HarnessError::BadConfig("a phantom needs at least 3 blobs"));
    }
    if spec.dims.iter().any(|&n| n < 8) || !(spec.extent > 0.0 && spec.extent <= 1.4) {
        return Err(HarnessError::BadConfig(
            "phantom dims must be >= 8 and extent in (0, 1.4]",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let semi = semi_axes(spec);
    let mask = ellipsoid(spec.dims, &semi);
    for tries in 1..=PHANTOM_TRIES {
        let blobs: Vec<Blob> = (0..spec.n_blobs)
            .map(|_| draw_blob(&mut rng, spec, &semi))
            .collect();
        let image = render(spec.dims, &semi, &blobs);
        if is_asymmetric(&image) {
            return Ok(Phantom {
                image,
                mask,
                spec: *spec,
                blobs,
                tries,
            });
        }
    }
    Err(HarnessError::PhantomRejected {
        tries: PHANTOM_TRIES,
    })
}

fn semi_axes(spec: &PhantomSpec) -> Vector3<f64> {
    Vector3::from_fn(|a, _| SEMI_AXES[a] * spec.extent * spec.dims[a] as f64)
}

/// Ellipsoidal radius `√Σ (p_a / s_a)²` of `p` relative to the grid center.
fn radius(p: &Vector3<f64>, c: &Vector3<f64>, semi: &Vector3<f64>) -> f64 {
    (p - c).component_div(semi).norm()
}

fn ellipsoid(dims: [usize; 3], semi: &Vector3<f64>) -> Volume3 {
    let c = grid_center(dims);
    Volume3::from_fn(dims, |x, y, z| {
        let p = Vector3::new(x as f64, y as f64, z as f64);
        if radius(&p, &c, semi) <= 1.0 {
            1.0
        } else {
            0.0
        }
    })
}

fn draw_blob(rng: &mut ChaCha8Rng, spec: &PhantomSpec, semi: &Vector3<f64>) -> Blob {
    let c = grid_center(spec.dims);
    // uniform in the ellipsoid shrunk to 0.75 of the mask
    let u = loop {
        let u = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if u.norm() <= 1.0 {
            break u;
        }
    };
    let center = c + u.component_mul(semi) * 0.75;
    let scale = semi.min();
    let sigmas = [0.15, 0.15, 0.15].map(|f: f64| f * scale * rng.random_range(0.6..1.6));
    let axis = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let rot = if axis.norm() > 1e-3 {
        axis_angle(axis, rng.random_range(0.0..180.0))
    } else {
        Matrix3::identity()
    };
    let mut axes = [0.0; 9];
    axes.copy_from_slice(rot.transpose().as_slice());
    Blob {
        center: [center.x, center.y, center.z],
        sigmas,
        axes,
        amplitude: rng.random_range(0.3..=1.0),
    }
}

fn taper(r: f64, semi_min: f64) -> f64 {
    if r <= 1.0 {
        return 1.0;
    }
    let d = (r - 1.0) * semi_min;
    if d >= TAPER_VOX {
        0.0
    } else {
        let s = (std::f64::consts::FRAC_PI_2 * d / TAPER_VOX).cos();
        s * s
    }
}

fn render(dims: [usize; 3], semi: &Vector3<f64>, blobs: &[Blob]) -> Volume3 {
    let c = grid_center(dims);
    let semi_min = semi.min();
    let forms: Vec<(Vector3<f64>, Matrix3<f64>, f64)> = blobs
        .iter()
        .map(|b| {
            let axes = Matrix3::from_row_slice(&b.axes);
            let inv = Matrix3::from_diagonal(&Vector3::from(b.sigmas.map(|s| 1.0 / (s * s))));
            (
                Vector3::from(b.center),
                axes.transpose() * inv * axes,
                b.amplitude,
            )
        })
        .collect();
    let mut img = Volume3::from_fn(dims, |x, y, z| {
        let p = Vector3::new(x as f64, y as f64, z as f64);
        let w = taper(radius(&p, &c, semi), semi_min);
        if w == 0.0 {
            return 0.0;
        }
        let v: f64 = forms
            .iter()
            .map(|(mu, q, a)| {
                let d = p - mu;
                a * (-0.5 * d.dot(&(q * d))).exp()
            })
            .sum();
        (w * v) as f32
    });
    let max = img.max();
    if max > 0.0 {
        img = img.map(|v| v / max);
    }
    img
}

fn is_asymmetric(img: &Volume3) -> bool {
    let [nx, ny, nz] = img.dims();
    let mut m = 0.0;
    let mut s = Vector3::zeros();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let v = img.get(x, y, z) as f64;
                m += v;
                s += Vector3::new(x as f64, y as f64, z as f64) * v;
            }
        }
    }
    if m <= 0.0 {
        return false;
    }
    let c = s / m;
    let mut cov = Matrix3::zeros();
    let mut pts = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let v = img.get(x, y, z) as f64;
                if v > 0.0 {
                    let d = Vector3::new(x as f64, y as f64, z as f64) - c;
                    cov += d * d.transpose() * v;
                    pts.push((d, v));
                }
            }
        }
    }
    let cov = cov / m;
    let eig = SymmetricEigen::new(cov);
    let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    let top = ev[2];
    if (ev[1] - ev[0]) / top < MIN_EIGEN_GAP || (ev[2] - ev[1]) / top < MIN_EIGEN_GAP {
        return false;
    }
    (0..3).all(|a| {
        let axis = eig.eigenvectors.column(a).into_owned();
        let sd = eig.eigenvalues[a].sqrt();
        let third: f64 = pts
            .iter()
            .map(|(d, v)| v * d.dot(&axis).powi(3))
            .sum::<f64>()
            / m;
        (third / sd.powi(3)).abs() >= MIN_SKEW
    })
}
