//! Random acquisition corruption: smooth multiplicative bias, gamma shift and
//! additive Gaussian noise, `Ĩ = clamp₀¹(I·B)^g + ξ`.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom3d::Volume3;

const RANGE_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum CorruptError {
    #[error("input intensity {value} at voxel {index} is outside [0, 1]")]
    OutOfRange { index: usize, value: f32 },
    #[error("invalid noise parameters: {0}")]
    BadParams(&'static str),
    #[error("draw was made for dims {expected:?}, volume has {got:?}")]
    DimsMismatch {
        expected: [usize; 3],
        got: [usize; 3],
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    /// Upper end of the uniform draw for the log-bias standard deviation.
    pub sigma_b_max: f64,
    /// Standard deviation of the log gamma exponent.
    pub sigma_gamma: f64,
    /// Upper end of the uniform draw for the noise standard deviation.
    pub sigma_xi_max: f64,
    /// Side of the coarse log-bias grid.
    pub bias_grid: usize,
    pub seed: u64,
}

impl NoiseParams {
    /// Caps used when training the feature extractor.
    pub fn training() -> Self {
        Self {
            sigma_b_max: 0.3,
            sigma_gamma: 0.2,
            sigma_xi_max: 0.05,
            bias_grid: 4,
            seed: 0,
        }
    }

    /// Caps used for the test sequences.
    pub fn test_caps() -> Self {
        Self {
            sigma_b_max: 0.2,
            sigma_gamma: 0.2,
            sigma_xi_max: 0.03,
            ..Self::training()
        }
    }

    /// Caps under which corruption is the identity.
    pub fn zero() -> Self {
        Self {
            sigma_b_max: 0.0,
            sigma_gamma: 0.0,
            sigma_xi_max: 0.0,
            ..Self::training()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn validate(&self) -> Result<(), CorruptError> {
        let caps = [self.sigma_b_max, self.sigma_gamma, self.sigma_xi_max];
        if caps.iter().any(|c| !(*c >= 0.0 && c.is_finite())) {
            return Err(CorruptError::BadParams(
                "caps must be finite and nonnegative",
            ));
        }
        if self.bias_grid < 2 {
            return Err(CorruptError::BadParams(
                "bias grid needs at least 2 nodes per axis",
            ));
        }
        Ok(())
    }
}

/// Every random value behind one corruption. Voxel noise is regenerated from
/// `noise_seed` rather than stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionDraw {
    pub dims: [usize; 3],
    pub sigma_b: f64,
    pub sigma_xi: f64,
    /// `γ`; the applied exponent is `e^γ`.
    pub gamma: f64,
    pub bias_grid: usize,
    /// Log-bias node values, x fastest.
    pub log_bias: Vec<f64>,
    pub noise_seed: u64,
}

impl CorruptionDraw {
    pub fn sample<R: Rng + ?Sized>(
        dims: [usize; 3],
        params: &NoiseParams,
        rng: &mut R,
    ) -> Result<Self, CorruptError> {
        params.validate()?;
        let sigma_b = uniform_to(rng, params.sigma_b_max);
        let sigma_xi = uniform_to(rng, params.sigma_xi_max);
        let gamma = normal(rng, params.sigma_gamma);
        let g = params.bias_grid;
        let log_bias = (0..g * g * g).map(|_| normal(rng, sigma_b)).collect();
        let noise_seed = rng.random();
        Ok(Self {
            dims,
            sigma_b,
            sigma_xi,
            gamma,
            bias_grid: g,
            log_bias,
            noise_seed,
        })
    }

    pub fn exponent(&self) -> f64 {
        self.gamma.exp()
    }

    /// Trilinear interpolation of the log-bias nodes, which span the volume
    /// corner to corner.
    pub fn log_bias_at(&self, p: &Vector3<f64>) -> f64 {
        let g = self.bias_grid;
        let mut lo = [0usize; 3];
        let mut fr = [0.0; 3];
        for a in 0..3 {
            let n = self.dims[a];
            let u = if n > 1 {
                p[a] * (g - 1) as f64 / (n - 1) as f64
            } else {
                0.0
            };
            let u = u.clamp(0.0, (g - 1) as f64);
            let i = (u.floor() as usize).min(g - 2);
            lo[a] = i;
            fr[a] = u - i as f64;
        }
        let mut acc = 0.0;
        for corner in 0..8 {
            let (bx, by, bz) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
            let w = [bx, by, bz]
                .iter()
                .enumerate()
                .map(|(a, &b)| if b == 1 { fr[a] } else { 1.0 - fr[a] })
                .product::<f64>();
            if w != 0.0 {
                acc += w * self.log_bias[(lo[0] + bx) + g * ((lo[1] + by) + g * (lo[2] + bz))];
            }
        }
        acc
    }

    /// `clamp₀¹(I·B)^g` without the additive noise.
    pub fn noiseless(&self, vol: &Volume3) -> Result<Volume3, CorruptError> {
        check_input(vol)?;
        if vol.dims() != self.dims {
            return Err(CorruptError::DimsMismatch {
                expected: self.dims,
                got: vol.dims(),
            });
        }
        let e = self.exponent();
        let mut out = vol.clone();
        let [nx, ny, nz] = self.dims;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let i = vol.index(x, y, z);
                    let b = self
                        .log_bias_at(&Vector3::new(x as f64, y as f64, z as f64))
                        .exp();
                    let v = (vol.data()[i] as f64 * b).clamp(0.0, 1.0);
                    out.data_mut()[i] = v.powf(e) as f32;
                }
            }
        }
        Ok(out)
    }

    /// Applies the full draw to `vol`.
    pub fn apply(&self, vol: &Volume3) -> Result<Volume3, CorruptError> {
        let mut out = self.noiseless(vol)?;
        if self.sigma_xi > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
            let dist = Normal::new(0.0, self.sigma_xi).expect("finite std");
            for v in out.data_mut() {
                *v = (*v as f64 + dist.sample(&mut rng)) as f32;
            }
        }
        Ok(out)
    }
}

fn uniform_to<R: Rng + ?Sized>(rng: &mut R, cap: f64) -> f64 {
    if cap > 0.0 {
        rng.random_range(0.0..=cap)
    } else {
        0.0
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    if std > 0.0 {
        Normal::new(0.0, std).expect("finite std").sample(rng)
    } else {
        0.0
    }
}

fn check_input(vol: &Volume3) -> Result<(), CorruptError> {
    for (index, &value) in vol.data().iter().enumerate() {
        let v = value as f64;
        if !(v >= -RANGE_TOL && v <= 1.0 + RANGE_TOL) {
            return Err(CorruptError::OutOfRange { index, value });
        }
    }
    Ok(())
}

/// Draws corruption parameters from `rng` and applies them.
pub fn corrupt<R: Rng + ?Sized>(
    vol: &Volume3,
    params: &NoiseParams,
    rng: &mut R,
) -> Result<(Volume3, CorruptionDraw), CorruptError> {
    check_input(vol)?;
    let draw = CorruptionDraw::sample(vol.dims(), params, rng)?;
    let out = draw.apply(vol)?;
    Ok((out, draw))
}

/// [`corrupt`] with a stream seeded from `params.seed`.
pub fn corrupt_seeded(
    vol: &Volume3,
    params: &NoiseParams,
) -> Result<(Volume3, CorruptionDraw), CorruptError> {
    corrupt(vol, params, &mut ChaCha8Rng::seed_from_u64(params.seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize) -> Volume3 {
        Volume3::from_fn([n, n, n], |x, y, z| {
            (x + 2 * y + 3 * z) as f32 / (6 * (n - 1)) as f32
        })
    }

    #[test]
    fn parameter_sets() {
        let p = NoiseParams::test_caps();
        assert_eq!(
            (p.sigma_b_max, p.sigma_gamma, p.sigma_xi_max),
            (0.2, 0.2, 0.03)
        );
        let t = NoiseParams::training();
        assert_eq!(
            (t.sigma_b_max, t.sigma_gamma, t.sigma_xi_max),
            (0.3, 0.2, 0.05)
        );
        assert_eq!(t.bias_grid, 4);
        let z = NoiseParams::zero();
        assert_eq!(
            (z.sigma_b_max, z.sigma_gamma, z.sigma_xi_max),
            (0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn zero_caps_are_the_identity() {
        let vol = ramp(9);
        let (out, draw) = corrupt_seeded(&vol, &NoiseParams::zero()).unwrap();
        assert_eq!(out, vol);
        assert_eq!(draw.exponent(), 1.0);
    }

    #[test]
    fn noiseless_stage_stays_in_unit_range() {
        let vol = Volume3::from_fn([8, 8, 8], |x, _, _| if x > 3 { 1.0 } else { 0.9 });
        let params = NoiseParams {
            sigma_b_max: 2.0,
            sigma_gamma: 1.0,
            ..NoiseParams::training()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let draw = CorruptionDraw::sample(vol.dims(), &params, &mut rng).unwrap();
            let clean = draw.noiseless(&vol).unwrap();
            assert!(clean.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn seeds_drive_the_output() {
        let vol = ramp(8);
        let p = NoiseParams::training();
        let (a, da) = corrupt_seeded(&vol, &p.with_seed(1)).unwrap();
        let (b, _) = corrupt_seeded(&vol, &p.with_seed(1)).unwrap();
        let (c, _) = corrupt_seeded(&vol, &p.with_seed(2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(da.apply(&vol).unwrap(), a);
    }

    #[test]
    fn draw_record_round_trips_through_json() {
        let vol = ramp(6);
        let (out, draw) = corrupt_seeded(&vol, &NoiseParams::training().with_seed(9)).unwrap();
        let back: CorruptionDraw =
            serde_json::from_str(&serde_json::to_string(&draw).unwrap()).unwrap();
        assert_eq!(back, draw);
        assert_eq!(back.apply(&vol).unwrap(), out);
    }

    #[test]
    fn bias_nodes_are_hit_at_grid_corners() {
        let draw = CorruptionDraw::sample(
            [10, 7, 13],
            &NoiseParams::training(),
            &mut ChaCha8Rng::seed_from_u64(4),
        )
        .unwrap();
        let g = draw.bias_grid;
        for k in 0..g {
            for j in 0..g {
                for i in 0..g {
                    let p = Vector3::new(
                        i as f64 * 9.0 / 3.0,
                        j as f64 * 6.0 / 3.0,
                        k as f64 * 12.0 / 3.0,
                    );
                    let node = draw.log_bias[i + g * (j + g * k)];
                    assert!((draw.log_bias_at(&p) - node).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rejects_out_of_range_input() {
        let mut vol = ramp(4);
        vol.data_mut()[5] = 1.5;
        assert!(matches!(
            corrupt_seeded(&vol, &NoiseParams::training()),
            Err(CorruptError::OutOfRange { index: 5, .. })
        ));
        let bad = NoiseParams {
            sigma_xi_max: -1.0,
            ..NoiseParams::training()
        };
        assert!(corrupt_seeded(&ramp(4), &bad).is_err());
    }
}
