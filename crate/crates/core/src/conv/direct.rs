//! SIMD direct convolution for `f32`.
//!
//! The input is copied once into a zero-padded buffer. Each step then
//! accumulates a run of consecutive x voxels for a block of output channels in
//! registers, so one input load feeds every channel in the block. Summation
//! order per output voxel is fixed: bias, then input channel, dz, dy, dx.
//!
//! Inputs with magnitude below [`FLUSH`] are read as zero. Smooth volumes
//! have long Gaussian tails, and subnormal operands slow FMA units by orders
//! of magnitude.

use super::FeatureMap;

/// Output x voxels are processed in groups of this many.
const GROUP: usize = 16;

pub(super) const FLUSH: f32 = 1e-20;

struct Plan<'a> {
    pin: Vec<f32>,
    px: usize,
    py: usize,
    pz: usize,
    dims: [usize; 3],
    c_in: usize,
    k: usize,
    weight: &'a [f32],
    bias: Option<&'a [f32]>,
}

impl Plan<'_> {
    /// Weights for output channels `o0..o0+valid`, laid out `[ci][tap][o]` with
    /// `ob` slots per tap (unused slots zero), plus the matching biases.
    fn block(&self, o0: usize, valid: usize, ob: usize) -> (Vec<f32>, [f32; 32]) {
        let taps = self.k.pow(3);
        let mut wb = vec![0.0; self.c_in * taps * ob];
        for o in 0..valid {
            for ci in 0..self.c_in {
                for t in 0..taps {
                    wb[(ci * taps + t) * ob + o] =
                        self.weight[((o0 + o) * self.c_in + ci) * taps + t];
                }
            }
        }
        let mut bb = [0.0; 32];
        if let Some(b) = self.bias {
            bb[..valid].copy_from_slice(&b[o0..o0 + valid]);
        }
        (wb, bb)
    }
}

macro_rules! kernel {
    ($name:ident, $feat:literal, $lanes:expr, $vt:ty, $zero:ident, $set1:ident, $load:ident, $fma:ident, $store:ident) => {
        #[target_feature(enable = $feat)]
        unsafe fn $name<const OB: usize>(
            plan: &Plan<'_>,
            wb: &[f32],
            bias: &[f32; 32],
            o0: usize,
            valid: usize,
            out: &mut [f32],
        ) {
            use std::arch::x86_64::*;
            const L: usize = $lanes;
            let [nx, ny, nz] = plan.dims;
            let k = plan.k;
            let taps = k * k * k;
            let v = nx * ny * nz;
            let pin = plan.pin.as_ptr();
            let w = wb.as_ptr();
            let mut tmp = [0.0f32; L];
            for z in 0..nz {
                for y in 0..ny {
                    let mut xc = 0;
                    while xc < nx {
                        let mut acc: [$vt; OB] = [$zero(); OB];
                        for o in 0..OB {
                            acc[o] = $set1(bias[o]);
                        }
                        for ci in 0..plan.c_in {
                            for dz in 0..k {
                                for dy in 0..k {
                                    let row = pin.add(
                                        ((ci * plan.pz + z + dz) * plan.py + y + dy) * plan.px + xc,
                                    );
                                    let wrow = w.add((ci * taps + (dz * k + dy) * k) * OB);
                                    for dx in 0..k {
                                        let x = $load(row.add(dx));
                                        let wt = wrow.add(dx * OB);
                                        for o in 0..OB {
                                            acc[o] = $fma($set1(*wt.add(o)), x, acc[o]);
                                        }
                                    }
                                }
                            }
                        }
                        let n = L.min(nx - xc);
                        let base = (z * ny + y) * nx + xc;
                        for o in 0..valid {
                            let dst = (o0 + o) * v + base;
                            if n == L {
                                $store(out.as_mut_ptr().add(dst), acc[o]);
                            } else {
                                $store(tmp.as_mut_ptr(), acc[o]);
                                out[dst..dst + n].copy_from_slice(&tmp[..n]);
                            }
                        }
                        xc += L;
                    }
                }
            }
        }
    };
}

#[cfg(target_arch = "x86_64")]
kernel!(
    block_avx512,
    "avx512f",
    16,
    __m512,
    _mm512_setzero_ps,
    _mm512_set1_ps,
    _mm512_loadu_ps,
    _mm512_fmadd_ps,
    _mm512_storeu_ps
);

#[cfg(target_arch = "x86_64")]
kernel!(
    block_avx2,
    "avx2,fma",
    8,
    __m256,
    _mm256_setzero_ps,
    _mm256_set1_ps,
    _mm256_loadu_ps,
    _mm256_fmadd_ps,
    _mm256_storeu_ps
);

#[derive(Clone, Copy, PartialEq)]
enum Isa {
    Avx512,
    Avx2,
}

#[cfg(target_arch = "x86_64")]
fn detect() -> Option<Isa> {
    if is_x86_feature_detected!("avx512f") {
        Some(Isa::Avx512)
    } else if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
        Some(Isa::Avx2)
    } else {
        None
    }
}

#[cfg(not(target_arch = "x86_64"))]
fn detect() -> Option<Isa> {
    None
}

/// Direct same-size cross-correlation, or `None` when the CPU lacks the
/// required vector extensions.
pub(super) fn conv3d_f32(
    input: &FeatureMap<f32>,
    weight: &[f32],
    bias: Option<&[f32]>,
    c_out: usize,
    k: usize,
) -> Option<FeatureMap<f32>> {
    let isa = detect()?;
    assert!(k % 2 == 1, "kernel size must be odd");
    let c_in = input.channels();
    assert_eq!(
        weight.len(),
        c_out * c_in * k.pow(3),
        "weight size mismatch"
    );
    if let Some(b) = bias {
        assert_eq!(b.len(), c_out);
    }
    let [nx, ny, nz] = input.dims();
    let p = k / 2;
    let (px, py, pz) = (nx.div_ceil(GROUP) * GROUP + 2 * p, ny + 2 * p, nz + 2 * p);
    let mut pin = vec![0.0f32; c_in * px * py * pz];
    for ci in 0..c_in {
        let src = input.channel(ci);
        for z in 0..nz {
            for y in 0..ny {
                let d = ((ci * pz + z + p) * py + y + p) * px + p;
                let s = (z * ny + y) * nx;
                for (dst, &v) in pin[d..d + nx].iter_mut().zip(&src[s..s + nx]) {
                    *dst = if v.abs() < FLUSH { 0.0 } else { v };
                }
            }
        }
    }
    let plan = Plan {
        pin,
        px,
        py,
        pz,
        dims: input.dims(),
        c_in,
        k,
        weight,
        bias,
    };
    let max_block = if isa == Isa::Avx512 { 24 } else { 12 };
    let mut out = FeatureMap::zeros(input.dims(), c_out);
    let mut o0 = 0;
    while o0 < c_out {
        let remaining = c_out - o0;
        let ob = if remaining >= max_block {
            max_block
        } else {
            remaining.div_ceil(4) * 4
        };
        let valid = ob.min(remaining);
        let (wb, bb) = plan.block(o0, valid, ob);
        let data = out.data_mut();
        // SAFETY: the ISA was detected above. Every load stays inside its
        // padded row: xc + lanes + dx <= nxc + 2p = px, and stores are bounded
        // by `n <= nx - xc` within channel `o0 + o < c_out`.
        unsafe {
            #[cfg(target_arch = "x86_64")]
            match (isa, ob) {
                (Isa::Avx512, 4) => block_avx512::<4>(&plan, &wb, &bb, o0, valid, data),
                (Isa::Avx512, 8) => block_avx512::<8>(&plan, &wb, &bb, o0, valid, data),
                (Isa::Avx512, 12) => block_avx512::<12>(&plan, &wb, &bb, o0, valid, data),
                (Isa::Avx512, 16) => block_avx512::<16>(&plan, &wb, &bb, o0, valid, data),
                (Isa::Avx512, 20) => block_avx512::<20>(&plan, &wb, &bb, o0, valid, data),
                (Isa::Avx512, _) => block_avx512::<24>(&plan, &wb, &bb, o0, valid, data),
                (Isa::Avx2, 4) => block_avx2::<4>(&plan, &wb, &bb, o0, valid, data),
                (Isa::Avx2, 8) => block_avx2::<8>(&plan, &wb, &bb, o0, valid, data),
                (Isa::Avx2, _) => block_avx2::<12>(&plan, &wb, &bb, o0, valid, data),
            }
        }
        o0 += valid;
    }
    Some(out)
}
