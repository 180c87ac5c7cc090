//! Multi-channel 3D fields and dense same-size 3D cross-correlation.
//!
//! Convolutions are lowered to GEMM via im2col over z-slabs. Weights are laid
//! out `[out][in][dz][dy][dx]` and tap `(dx, dy, dz)` reads the input at offset
//! `(dx - c, dy - c, dz - c)` with `c = k / 2`. Padding is zero, stride 1.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::geom3d::Volume3;

mod direct;

/// Scalar type the conv engine runs in.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + std::iter::Sum + 'static
{
    /// Raw strided GEMM, `C = alpha · A · B + beta · C`.
    ///
    /// # Safety
    /// Pointers and strides must address valid `m × k`, `k × n` and `m × n`
    /// matrices; `C` must not alias `A` or `B`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    /// Specialized forward convolution, if one exists for this type and CPU.
    fn conv_fast(
        _input: &FeatureMap<Self>,
        _weight: &[Self],
        _bias: Option<&[Self]>,
        _c_out: usize,
        _k: usize,
    ) -> Option<FeatureMap<Self>> {
        None
    }

    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap()
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn conv_fast(
        input: &FeatureMap<f32>,
        weight: &[f32],
        bias: Option<&[f32]>,
        c_out: usize,
        k: usize,
    ) -> Option<FeatureMap<f32>> {
        direct::conv3d_f32(input, weight, bias, c_out, k)
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Strided view of a matrix inside a slice.
#[derive(Clone, Copy)]
pub(crate) struct MatRef {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl MatRef {
    pub fn row_major(cols: usize) -> Self {
        Self {
            offset: 0,
            rs: cols,
            cs: 1,
        }
    }

    /// Transpose of a row-major matrix with `stored_cols` columns.
    pub fn transposed(stored_cols: usize) -> Self {
        Self {
            offset: 0,
            rs: 1,
            cs: stored_cols,
        }
    }

    fn last(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            self.offset
        } else {
            self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
        }
    }
}

/// Bounds-checked GEMM over slices: `C[m×n] = alpha · A[m×k] · B[k×n] + beta · C`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    av: MatRef,
    b: &[T],
    bv: MatRef,
    beta: T,
    c: &mut [T],
    cv: MatRef,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || av.last(m, k) < a.len(), "gemm: A out of bounds");
    assert!(k == 0 || bv.last(k, n) < b.len(), "gemm: B out of bounds");
    assert!(cv.last(m, n) < c.len(), "gemm: C out of bounds");
    // SAFETY: every addressed element was bounds-checked above and `c` is a
    // unique borrow, so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        )
    }
}

/// Channel-major stack of scalar volumes sharing one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    dims: [usize; 3],
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn zeros(dims: [usize; 3], channels: usize) -> Self {
        Self {
            dims,
            channels,
            data: vec![T::zero(); dims[0] * dims[1] * dims[2] * channels],
        }
    }

    pub fn from_data(dims: [usize; 3], channels: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), dims[0] * dims[1] * dims[2] * channels);
        Self {
            dims,
            channels,
            data,
        }
    }

    pub fn from_volume(vol: &Volume3) -> Self {
        Self {
            dims: vol.dims(),
            channels: 1,
            data: vol.data().iter().map(|&v| T::of(v as f64)).collect(),
        }
    }

    /// Stacks volumes as channels. All volumes must share dims.
    pub fn from_volumes(vols: &[Volume3]) -> Option<Self> {
        let dims = vols.first()?.dims();
        if vols.iter().any(|v| v.dims() != dims) {
            return None;
        }
        let data = vols
            .iter()
            .flat_map(|v| v.data().iter().map(|&x| T::of(x as f64)))
            .collect();
        Some(Self {
            dims,
            channels: vols.len(),
            data,
        })
    }

    pub fn channel_volume(&self, c: usize) -> Volume3 {
        let data = self.channel(c).iter().map(|v| v.f64() as f32).collect();
        Volume3::new(self.dims, [1.0; 3], data).expect("finite features")
    }

    pub fn to_volumes(&self) -> Vec<Volume3> {
        (0..self.channels).map(|c| self.channel_volume(c)).collect()
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Voxels per channel.
    pub fn voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let v = self.voxels();
        &self.data[c * v..(c + 1) * v]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let v = self.voxels();
        &mut self.data[c * v..(c + 1) * v]
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v.f64() * v.f64()).sum()
    }

    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap {
            dims: self.dims,
            channels: self.channels,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }
}

/// Elements of the im2col buffer allowed per slab.
const SLAB_BUDGET: usize = 1 << 20;

fn slab_planes(dims: [usize; 3], rows: usize) -> usize {
    let plane = dims[0] * dims[1];
    (SLAB_BUDGET / (rows * plane).max(1)).clamp(1, dims[2])
}

/// Fills `cols` (`c_in·k³ × N`, N = planes z0..z1) with shifted input rows.
fn im2col<T: Real>(input: &FeatureMap<T>, k: usize, z0: usize, z1: usize, cols: &mut [T]) {
    let [nx, ny, nz] = input.dims;
    let c = (k / 2) as isize;
    let n = (z1 - z0) * nx * ny;
    let taps = k * k * k;
    for ci in 0..input.channels {
        let src = input.channel(ci);
        for tap in 0..taps {
            let dx = (tap % k) as isize - c;
            let dy = ((tap / k) % k) as isize - c;
            let dz = (tap / (k * k)) as isize - c;
            let row = &mut cols[(ci * taps + tap) * n..(ci * taps + tap + 1) * n];
            let x_lo = (-dx).clamp(0, nx as isize) as usize;
            let x_hi = (nx as isize - dx).clamp(0, nx as isize) as usize;
            let mut o = 0;
            for z in z0..z1 {
                let iz = z as isize + dz;
                for y in 0..ny {
                    let iy = y as isize + dy;
                    let seg = &mut row[o..o + nx];
                    o += nx;
                    if iz < 0 || iz >= nz as isize || iy < 0 || iy >= ny as isize || x_lo >= x_hi {
                        seg.fill(T::zero());
                        continue;
                    }
                    let base = (iy as usize + ny * iz as usize) * nx;
                    seg[..x_lo].fill(T::zero());
                    let s0 = (base as isize + x_lo as isize + dx) as usize;
                    seg[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                    seg[x_hi..].fill(T::zero());
                }
            }
        }
    }
}

/// Scatter-adds `cols` back into `grad_in` (adjoint of [`im2col`]).
fn col2im<T: Real>(cols: &[T], k: usize, z0: usize, z1: usize, grad_in: &mut FeatureMap<T>) {
    let [nx, ny, nz] = grad_in.dims;
    let c = (k / 2) as isize;
    let n = (z1 - z0) * nx * ny;
    let taps = k * k * k;
    for ci in 0..grad_in.channels {
        let dst = grad_in.channel_mut(ci);
        for tap in 0..taps {
            let dx = (tap % k) as isize - c;
            let dy = ((tap / k) % k) as isize - c;
            let dz = (tap / (k * k)) as isize - c;
            let row = &cols[(ci * taps + tap) * n..(ci * taps + tap + 1) * n];
            let x_lo = (-dx).clamp(0, nx as isize) as usize;
            let x_hi = (nx as isize - dx).clamp(0, nx as isize) as usize;
            if x_lo >= x_hi {
                continue;
            }
            let mut o = 0;
            for z in z0..z1 {
                let iz = z as isize + dz;
                for y in 0..ny {
                    let iy = y as isize + dy;
                    let seg = &row[o..o + nx];
                    o += nx;
                    if iz < 0 || iz >= nz as isize || iy < 0 || iy >= ny as isize {
                        continue;
                    }
                    let base = (iy as usize + ny * iz as usize) * nx;
                    let s0 = (base as isize + x_lo as isize + dx) as usize;
                    for (d, s) in dst[s0..s0 + (x_hi - x_lo)].iter_mut().zip(&seg[x_lo..x_hi]) {
                        *d = *d + *s;
                    }
                }
            }
        }
    }
}

/// Same-size 3D cross-correlation with an odd cubic kernel.
///
/// `weight` has `c_out · c_in · k³` entries, `bias` (if any) `c_out`.
pub fn conv3d<T: Real>(
    input: &FeatureMap<T>,
    weight: &[T],
    bias: Option<&[T]>,
    c_out: usize,
    k: usize,
) -> FeatureMap<T> {
    T::conv_fast(input, weight, bias, c_out, k)
        .unwrap_or_else(|| conv3d_gemm(input, weight, bias, c_out, k))
}

/// GEMM-lowered form of [`conv3d`]; same result up to summation order.
pub fn conv3d_gemm<T: Real>(
    input: &FeatureMap<T>,
    weight: &[T],
    bias: Option<&[T]>,
    c_out: usize,
    k: usize,
) -> FeatureMap<T> {
    assert!(k % 2 == 1, "kernel size must be odd");
    let c_in = input.channels;
    let rows = c_in * k * k * k;
    assert_eq!(weight.len(), c_out * rows, "weight size mismatch");
    let dims = input.dims;
    let v = input.voxels();
    let plane = dims[0] * dims[1];
    let mut out = FeatureMap::zeros(dims, c_out);
    if let Some(b) = bias {
        assert_eq!(b.len(), c_out);
        for (o, &bo) in b.iter().enumerate() {
            out.channel_mut(o).fill(bo);
        }
    }
    let step = slab_planes(dims, rows);
    let mut cols = vec![T::zero(); rows * step * plane];
    let mut z0 = 0;
    while z0 < dims[2] {
        let z1 = (z0 + step).min(dims[2]);
        let n = (z1 - z0) * plane;
        im2col(input, k, z0, z1, &mut cols[..rows * n]);
        gemm(
            c_out,
            rows,
            n,
            T::one(),
            weight,
            MatRef::row_major(rows),
            &cols[..rows * n],
            MatRef::row_major(n),
            T::one(),
            &mut out.data,
            MatRef {
                offset: z0 * plane,
                rs: v,
                cs: 1,
            },
        );
        z0 = z1;
    }
    out
}

/// Gradients of [`conv3d`] given the upstream gradient `grad_out`.
pub struct ConvGrads<T> {
    pub input: Option<FeatureMap<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv3d_backward<T: Real>(
    input: &FeatureMap<T>,
    weight: &[T],
    grad_out: &FeatureMap<T>,
    k: usize,
    need_input_grad: bool,
) -> ConvGrads<T> {
    let c_in = input.channels;
    let c_out = grad_out.channels;
    let rows = c_in * k * k * k;
    assert_eq!(weight.len(), c_out * rows);
    assert_eq!(input.dims, grad_out.dims);
    let dims = input.dims;
    let v = input.voxels();
    let plane = dims[0] * dims[1];
    let mut gw = vec![T::zero(); c_out * rows];
    let gb = (0..c_out)
        .map(|o| grad_out.channel(o).iter().fold(0.0f64, |a, x| a + x.f64()))
        .map(T::of)
        .collect();
    let mut gin = need_input_grad.then(|| FeatureMap::zeros(dims, c_in));
    let step = slab_planes(dims, rows);
    let mut cols = vec![T::zero(); rows * step * plane];
    let mut dcols = if need_input_grad {
        vec![T::zero(); rows * step * plane]
    } else {
        Vec::new()
    };
    let mut z0 = 0;
    while z0 < dims[2] {
        let z1 = (z0 + step).min(dims[2]);
        let n = (z1 - z0) * plane;
        im2col(input, k, z0, z1, &mut cols[..rows * n]);
        let go = MatRef {
            offset: z0 * plane,
            rs: v,
            cs: 1,
        };
        // dW += dOut · colsᵀ
        gemm(
            c_out,
            n,
            rows,
            T::one(),
            &grad_out.data,
            go,
            &cols[..rows * n],
            MatRef::transposed(n),
            T::one(),
            &mut gw,
            MatRef::row_major(rows),
        );
        if let Some(gin) = gin.as_mut() {
            // dCols = Wᵀ · dOut
            gemm(
                rows,
                c_out,
                n,
                T::one(),
                weight,
                MatRef::transposed(rows),
                &grad_out.data,
                go,
                T::zero(),
                &mut dcols[..rows * n],
                MatRef::row_major(n),
            );
            col2im(&dcols[..rows * n], k, z0, z1, gin);
        }
        z0 = z1;
    }
    ConvGrads {
        input: gin,
        weight: gw,
        bias: gb,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop cross-correlation.
    fn naive(input: &FeatureMap<f64>, w: &[f64], c_out: usize, k: usize) -> FeatureMap<f64> {
        let [nx, ny, nz] = input.dims();
        let c = (k / 2) as i64;
        let mut out = FeatureMap::zeros(input.dims(), c_out);
        for o in 0..c_out {
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        let mut acc = 0.0;
                        for i in 0..input.channels() {
                            for dz in 0..k {
                                for dy in 0..k {
                                    for dx in 0..k {
                                        let (ix, iy, iz) = (
                                            x as i64 + dx as i64 - c,
                                            y as i64 + dy as i64 - c,
                                            z as i64 + dz as i64 - c,
                                        );
                                        if ix < 0
                                            || iy < 0
                                            || iz < 0
                                            || ix >= nx as i64
                                            || iy >= ny as i64
                                            || iz >= nz as i64
                                        {
                                            continue;
                                        }
                                        let wi = ((o * input.channels() + i) * k + dz) * k * k
                                            + dy * k
                                            + dx;
                                        let vi =
                                            ix as usize + nx * (iy as usize + ny * iz as usize);
                                        acc += w[wi] * input.channel(i)[vi];
                                    }
                                }
                            }
                        }
                        out.channel_mut(o)[x + nx * (y + ny * z)] = acc;
                    }
                }
            }
        }
        out
    }

    fn random_map(rng: &mut ChaCha8Rng, dims: [usize; 3], c: usize) -> FeatureMap<f64> {
        let n = dims[0] * dims[1] * dims[2] * c;
        FeatureMap::from_data(
            dims,
            c,
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    #[test]
    fn matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, dims, c_out) in &[
            (3, [5, 4, 6], 3),
            (5, [7, 6, 3], 3),
            (1, [3, 3, 3], 3),
            (3, [19, 3, 4], 21),
        ] {
            let input = random_map(&mut rng, dims, 2);
            let w: Vec<f64> = (0..c_out * 2 * k * k * k)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let fast = conv3d(&input, &w, None, c_out, k);
            let lowered = conv3d_gemm(&input, &w, None, c_out, k);
            let slow = naive(&input, &w, c_out, k);
            for ((a, b), c) in fast.data().iter().zip(slow.data()).zip(lowered.data()) {
                assert!((a - b).abs() < 1e-12);
                assert!((c - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn delta_input_reproduces_flipped_kernel() {
        let mut input = FeatureMap::<f64>::zeros([7, 7, 7], 1);
        input.channel_mut(0)[3 + 7 * (3 + 7 * 3)] = 1.0;
        let w: Vec<f64> = (0..27).map(|i| i as f64).collect();
        let out = conv3d(&input, &w, None, 1, 3);
        // Output at delta + s equals weight at tap -s.
        for dz in 0..3 {
            for dy in 0..3 {
                for dx in 0..3 {
                    let (x, y, z) = (4 - dx, 4 - dy, 4 - dz);
                    assert_eq!(
                        out.channel(0)[x + 7 * (y + 7 * z)],
                        w[dx + 3 * (dy + 3 * dz)]
                    );
                }
            }
        }
    }

    #[test]
    fn backward_is_the_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dims = [5, 6, 4];
        let k = 3;
        let x = random_map(&mut rng, dims, 2);
        let g = random_map(&mut rng, dims, 3);
        let w: Vec<f64> = (0..3 * 2 * 27)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let b = vec![0.3, -0.2, 0.1];
        let grads = conv3d_backward(&x, &w, &g, k, true);
        // <g, conv(x)> is linear in x, w and b.
        let f = |x: &FeatureMap<f64>, w: &[f64], b: &[f64]| -> f64 {
            let y = conv3d(x, w, Some(b), 3, k);
            y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        };
        let base = f(&x, &w, &b);
        let gi = grads.input.unwrap();
        for idx in [0, 17, 59, 119, 200] {
            let mut x2 = x.clone();
            x2.data_mut()[idx] += 1.0;
            assert!((f(&x2, &w, &b) - base - gi.data()[idx]).abs() < 1e-9);
        }
        for idx in [0, 13, 80, 161] {
            let mut w2 = w.clone();
            w2[idx] += 1.0;
            assert!((f(&x, &w2, &b) - base - grads.weight[idx]).abs() < 1e-9);
        }
        for o in 0..3 {
            let mut b2 = b.clone();
            b2[o] += 1.0;
            assert!((f(&x, &w, &b2) - base - grads.bias[o]).abs() < 1e-9);
        }
    }

    #[test]
    fn f32_agrees_with_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_map(&mut rng, [8, 8, 8], 3);
        let w: Vec<f64> = (0..2 * 3 * 125)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let y64 = conv3d(&x, &w, None, 2, 5);
        let w32: Vec<f32> = w.iter().map(|&v| v as f32).collect();
        let y32 = conv3d(&x.cast::<f32>(), &w32, None, 2, 5);
        for (a, b) in y64.data().iter().zip(y32.data()) {
            assert!((a - *b as f64).abs() < 1e-4);
        }
    }
}
