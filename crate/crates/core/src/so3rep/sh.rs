//! Real spherical harmonics, orthonormal on the unit sphere.
//!
//! Components of order `l` are ordered `m = -l..=l`. No Condon–Shortley phase:
//! for `m > 0` the harmonic is `√2 N P̄_l^m(z) Re (x + i y)^m`, for `m < 0`
//! it uses `Im (x + i y)^|m|`, where `P̄_l^m = P_l^m / sin^m θ` is evaluated by
//! the standard three-term recurrence. Order 1 is `√(3/4π) (y, z, x)`.

use std::f64::consts::PI;

use nalgebra::Vector3;

use super::{So3Error, L_MAX};

const UNIT_TOL: f64 = 1e-9;

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// `N_l^m = sqrt((2l+1)/(4π) · (l-m)!/(l+m)!)`, times √2 for `m > 0`.
fn norm_const(l: usize, m: usize) -> f64 {
    let n = ((2 * l + 1) as f64 / (4.0 * PI) * factorial(l - m) / factorial(l + m)).sqrt();
    if m == 0 {
        n
    } else {
        n * std::f64::consts::SQRT_2
    }
}

/// Evaluates order `l` harmonics at `(x, y, z)` into `out` (length `2l + 1`).
///
/// The polynomial form is evaluated as-is; callers are responsible for passing
/// a unit vector.
pub fn real_sh_into(l: usize, x: f64, y: f64, z: f64, out: &mut [f64]) {
    assert!(l <= L_MAX, "order {l} exceeds L_MAX");
    debug_assert_eq!(out.len(), 2 * l + 1);
    // (x + iy)^m for m = 0..=l
    let mut re = [0.0f64; L_MAX + 1];
    let mut im = [0.0f64; L_MAX + 1];
    re[0] = 1.0;
    for m in 1..=l {
        re[m] = re[m - 1] * x - im[m - 1] * y;
        im[m] = re[m - 1] * y + im[m - 1] * x;
    }
    for m in 0..=l {
        // P̄_m^m = (2m - 1)!!, then climb in l.
        let mut p_mm = 1.0;
        for k in 1..=m {
            p_mm *= (2 * k - 1) as f64;
        }
        let p = if l == m {
            p_mm
        } else {
            let mut p_prev = p_mm;
            let mut p_cur = z * (2 * m + 1) as f64 * p_mm;
            for ll in (m + 2)..=l {
                let next = ((2 * ll - 1) as f64 * z * p_cur - (ll + m - 1) as f64 * p_prev)
                    / (ll - m) as f64;
                p_prev = p_cur;
                p_cur = next;
            }
            p_cur
        };
        let n = norm_const(l, m);
        if m == 0 {
            out[l] = n * p;
        } else {
            out[l + m] = n * p * re[m];
            out[l - m] = n * p * im[m];
        }
    }
}

/// Order `l` real harmonics at the unit vector `u`.
pub fn real_sh(l: usize, u: &Vector3<f64>) -> Result<Vec<f64>, So3Error> {
    if l > L_MAX {
        return Err(So3Error::OrderTooHigh(l));
    }
    let n = u.norm();
    if !((n - 1.0).abs() <= UNIT_TOL) {
        return Err(So3Error::NotUnit(n));
    }
    let mut out = vec![0.0; 2 * l + 1];
    real_sh_into(l, u.x, u.y, u.z, &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_unit(rng: &mut impl Rng) -> Vector3<f64> {
        loop {
            let v = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 0.1 && n <= 1.0 {
                return v / n;
            }
        }
    }

    #[test]
    fn order_zero_is_constant() {
        let v = real_sh(0, &Vector3::new(0.0, 0.6, 0.8)).unwrap();
        assert_abs_diff_eq!(v[0], 0.282_094_791_773_878_1, epsilon = 1e-15);
        assert_abs_diff_eq!(v[0], 1.0 / (2.0 * PI.sqrt()), epsilon = 1e-15);
    }

    #[test]
    fn order_one_is_permuted_coordinates() {
        let u = Vector3::new(0.48, 0.6, 0.64);
        let v = real_sh(1, &u).unwrap();
        let k = (3.0 / (4.0 * PI)).sqrt();
        assert_abs_diff_eq!(v[0], k * u.y, epsilon = 1e-15);
        assert_abs_diff_eq!(v[1], k * u.z, epsilon = 1e-15);
        assert_abs_diff_eq!(v[2], k * u.x, epsilon = 1e-15);
    }

    #[test]
    fn parity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let u = random_unit(&mut rng);
            for l in 0..=L_MAX {
                let a = real_sh(l, &u).unwrap();
                let b = real_sh(l, &-u).unwrap();
                let s = if l % 2 == 0 { 1.0 } else { -1.0 };
                for (x, y) in a.iter().zip(&b) {
                    assert_abs_diff_eq!(*y, s * x, epsilon = 1e-13);
                }
            }
        }
    }

    #[test]
    fn rejects_non_unit_and_high_order() {
        assert!(matches!(
            real_sh(1, &Vector3::new(1.0, 1.0, 0.0)),
            Err(So3Error::NotUnit(_))
        ));
        assert!(matches!(
            real_sh(5, &Vector3::new(1.0, 0.0, 0.0)),
            Err(So3Error::OrderTooHigh(5))
        ));
    }

    /// Addition theorem: Σ_m S_m(u)² = (2l+1)/(4π) for every unit u.
    #[test]
    fn addition_theorem() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let u = random_unit(&mut rng);
            for l in 0..=L_MAX {
                let s: f64 = real_sh(l, &u).unwrap().iter().map(|v| v * v).sum();
                assert_abs_diff_eq!(s, (2 * l + 1) as f64 / (4.0 * PI), epsilon = 1e-12);
            }
        }
    }

    /// Gauss–Legendre in cos θ times a uniform rule in φ integrates polynomials
    /// of degree ≤ 8 on the sphere exactly.
    #[test]
    fn orthonormal_under_product_quadrature() {
        let (nodes, weights) = gauss_legendre(12);
        let n_phi = 24;
        let dim: usize = (0..=L_MAX).map(|l| 2 * l + 1).sum();
        let mut gram = vec![0.0; dim * dim];
        let mut vals = vec![0.0; dim];
        for (ct, w) in nodes.iter().zip(&weights) {
            let st = (1.0 - ct * ct).sqrt();
            for k in 0..n_phi {
                let phi = 2.0 * PI * k as f64 / n_phi as f64;
                let u = Vector3::new(st * phi.cos(), st * phi.sin(), *ct);
                let mut off = 0;
                for l in 0..=L_MAX {
                    real_sh_into(l, u.x, u.y, u.z, &mut vals[off..off + 2 * l + 1]);
                    off += 2 * l + 1;
                }
                let wq = w * 2.0 * PI / n_phi as f64;
                for i in 0..dim {
                    for j in 0..dim {
                        gram[i * dim + j] += wq * vals[i] * vals[j];
                    }
                }
            }
        }
        for i in 0..dim {
            for j in 0..dim {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(gram[i * dim + j], expect, epsilon = 1e-12);
            }
        }
    }

    fn legendre_with_derivative(n: usize, z: f64) -> (f64, f64) {
        let (mut p0, mut p1) = (1.0, z);
        for k in 2..=n {
            let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
            p0 = p1;
            p1 = p2;
        }
        (p1, n as f64 * (z * p1 - p0) / (z * z - 1.0))
    }

    fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
        let mut x = vec![0.0; n];
        let mut w = vec![0.0; n];
        for i in 0..n {
            let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            for _ in 0..50 {
                let (p, dp) = legendre_with_derivative(n, z);
                z -= p / dp;
            }
            let (_, dp) = legendre_with_derivative(n, z);
            x[i] = z;
            w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        }
        (x, w)
    }
}
