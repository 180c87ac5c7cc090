use nalgebra::Vector3;

use super::GeomError;

/// Scalar voxel grid. Voxels are stored x-fastest: `index = x + nx * (y + ny * z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3 {
    dims: [usize; 3],
    spacing: [f32; 3],
    data: Vec<f32>,
}

impl Volume3 {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Result<Self, GeomError> {
        if dims.contains(&0) {
            return Err(GeomError::EmptyDims(dims));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(GeomError::DataLength {
                expected: n,
                got: data.len(),
            });
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(GeomError::BadSpacing(spacing));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(GeomError::NonFinite(i));
        }
        Ok(Self {
            dims,
            spacing,
            data,
        })
    }

    /// Zero-filled volume with unit spacing.
    pub fn zeros(dims: [usize; 3]) -> Self {
        assert!(dims.iter().all(|&d| d > 0), "volume dims must be positive");
        Self {
            dims,
            spacing: [1.0; 3],
            data: vec![0.0; dims[0] * dims[1] * dims[2]],
        }
    }

    /// Builds a unit-spacing volume by evaluating `f(x, y, z)` at every voxel.
    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut vol = Self::zeros(dims);
        let mut i = 0;
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    vol.data[i] = f(x, y, z);
                    i += 1;
                }
            }
        }
        vol
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access to the voxels. Callers must keep values finite.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f32) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    /// Value at signed integer coordinates, 0 outside the grid.
    #[inline]
    pub fn get_or_zero(&self, x: i64, y: i64, z: i64) -> f32 {
        if x < 0
            || y < 0
            || z < 0
            || x >= self.dims[0] as i64
            || y >= self.dims[1] as i64
            || z >= self.dims[2] as i64
        {
            0.0
        } else {
            self.get(x as usize, y as usize, z as usize)
        }
    }

    /// Voxel coordinates of the grid center, `(n - 1) / 2` per axis.
    pub fn center(&self) -> Vector3<f64> {
        grid_center(self.dims)
    }

    pub fn same_shape(&self, other: &Volume3) -> bool {
        self.dims == other.dims
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Volume3 {
        Volume3 {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    /// Squared L2 norm accumulated in f64.
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    /// Mean squared difference to another volume of the same shape.
    pub fn mse(&self, other: &Volume3) -> Result<f64, GeomError> {
        if !self.same_shape(other) {
            return Err(GeomError::DimsMismatch(self.dims, other.dims));
        }
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum();
        Ok(s / self.len() as f64)
    }

    /// Separable Gaussian smoothing with zero boundary, kernel truncated at 3σ.
    pub fn gaussian_smooth(&self, sigma: f64) -> Volume3 {
        if sigma <= 0.0 {
            return self.clone();
        }
        let kernel = gaussian_kernel_1d(sigma);
        let mut out = self.clone();
        for axis in 0..3 {
            out = out.convolve_axis(axis, &kernel);
        }
        out
    }

    fn convolve_axis(&self, axis: usize, kernel: &[f64]) -> Volume3 {
        let r = (kernel.len() / 2) as i64;
        let [nx, ny, nz] = self.dims;
        let mut out = Volume3 {
            dims: self.dims,
            spacing: self.spacing,
            data: vec![0.0; self.len()],
        };
        let n_axis = self.dims[axis] as i64;
        let stride = match axis {
            0 => 1,
            1 => nx,
            _ => nx * ny,
        } as i64;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let pos = [x, y, z][axis] as i64;
                    let base = self.index(x, y, z) as i64;
                    let mut acc = 0.0f64;
                    for (k, &w) in kernel.iter().enumerate() {
                        let off = k as i64 - r;
                        let q = pos + off;
                        if q >= 0 && q < n_axis {
                            acc += w * self.data[(base + off * stride) as usize] as f64;
                        }
                    }
                    out.data[base as usize] = acc as f32;
                }
            }
        }
        out
    }
}

/// Normalized, symmetric 1D Gaussian with radius `ceil(3σ)`.
pub fn gaussian_kernel_1d(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

pub fn grid_center(dims: [usize; 3]) -> Vector3<f64> {
    Vector3::new(
        (dims[0] as f64 - 1.0) / 2.0,
        (dims[1] as f64 - 1.0) / 2.0,
        (dims[2] as f64 - 1.0) / 2.0,
    )
}
