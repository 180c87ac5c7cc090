use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{RigidTransform, Volume3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Interp {
    #[default]
    Trilinear,
    Nearest,
}

/// Trilinear sample at continuous voxel coordinates; neighbours outside the grid read as 0.
#[inline]
pub fn sample_trilinear(vol: &Volume3, p: &Vector3<f64>) -> f64 {
    let fx = p.x.floor();
    let fy = p.y.floor();
    let fz = p.z.floor();
    let (ax, ay, az) = (p.x - fx, p.y - fy, p.z - fz);
    let (x0, y0, z0) = (fx as i64, fy as i64, fz as i64);
    let [nx, ny, nz] = vol.dims();
    let (nx, ny, nz) = (nx as i64, ny as i64, nz as i64);
    if x0 < -1 || y0 < -1 || z0 < -1 || x0 >= nx || y0 >= ny || z0 >= nz {
        return 0.0;
    }
    let wx = [1.0 - ax, ax];
    let wy = [1.0 - ay, ay];
    let wz = [1.0 - az, az];
    let mut acc = 0.0;
    for (dz, &wz) in wz.iter().enumerate() {
        if wz == 0.0 {
            continue;
        }
        for (dy, &wy) in wy.iter().enumerate() {
            if wy == 0.0 {
                continue;
            }
            for (dx, &wx) in wx.iter().enumerate() {
                if wx == 0.0 {
                    continue;
                }
                let v = vol.get_or_zero(x0 + dx as i64, y0 + dy as i64, z0 + dz as i64);
                acc += wz * wy * wx * v as f64;
            }
        }
    }
    acc
}

#[inline]
pub fn sample_nearest(vol: &Volume3, p: &Vector3<f64>) -> f64 {
    vol.get_or_zero(p.x.round() as i64, p.y.round() as i64, p.z.round() as i64) as f64
}

/// Resamples `vol` so that `out(x) = vol(T⁻¹ x)` on the same grid. Samples that
/// fall outside the input grid read as 0.
pub fn warp(vol: &Volume3, transform: &RigidTransform, interp: Interp) -> Volume3 {
    let inv = transform.inverse();
    let a = *inv.rotation();
    let b = inv.origin_translation();
    let [nx, ny, nz] = vol.dims();
    let mut data = Vec::with_capacity(vol.len());
    for z in 0..nz {
        for y in 0..ny {
            let row = a * Vector3::new(0.0, y as f64, z as f64) + b;
            let step = a.column(0).into_owned();
            for x in 0..nx {
                let p = row + step * x as f64;
                let v = match interp {
                    Interp::Trilinear => sample_trilinear(vol, &p),
                    Interp::Nearest => sample_nearest(vol, &p),
                };
                data.push(v as f32);
            }
        }
    }
    Volume3::new(vol.dims(), vol.spacing(), data).expect("warp preserves shape")
}
