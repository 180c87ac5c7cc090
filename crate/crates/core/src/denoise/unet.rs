use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DenoiseError;
use crate::conv::{conv3d, conv3d_backward, FeatureMap, Real};
use crate::geom3d::Volume3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Number of 2× downsamplings.
    pub levels: usize,
    /// Kernels per convolution.
    pub width: usize,
    pub convs_per_level: usize,
    /// Kernel side of the hidden convolutions.
    pub kernel: usize,
    /// Adds the input to the output, so the network predicts a correction.
    pub residual: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            levels: 2,
            width: 16,
            convs_per_level: 2,
            kernel: 3,
            residual: false,
        }
    }
}

impl DenoiserConfig {
    /// Four downsamplings with 32 kernels.
    pub fn large() -> Self {
        Self {
            levels: 4,
            width: 32,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), DenoiseError> {
        if self.levels == 0 || self.width == 0 || self.convs_per_level == 0 {
            return Err(DenoiseError::BadConfig(
                "levels, width and convs per level must be positive",
            ));
        }
        if self.kernel % 2 == 0 {
            return Err(DenoiseError::BadConfig("kernel size must be odd"));
        }
        Ok(())
    }

    /// Input side lengths must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << self.levels
    }

    /// `(c_in, c_out, k)` of every convolution in execution order.
    fn convs(&self) -> Vec<ConvSpec> {
        let w = self.width;
        let k = self.kernel;
        let mut v = Vec::new();
        for lvl in 0..=self.levels {
            for i in 0..self.convs_per_level {
                let c_in = if lvl == 0 && i == 0 { 1 } else { w };
                v.push(ConvSpec { c_in, c_out: w, k });
            }
        }
        for lvl in (0..self.levels).rev() {
            for i in 0..self.convs_per_level {
                let c_in = if i == 0 && lvl > 0 { 2 * w } else { w };
                v.push(ConvSpec { c_in, c_out: w, k });
            }
        }
        v.push(ConvSpec {
            c_in: w,
            c_out: 1,
            k: 1,
        });
        v
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvSpec {
    c_in: usize,
    c_out: usize,
    k: usize,
}

impl ConvSpec {
    fn weights(&self) -> usize {
        self.c_out * self.c_in * self.k.pow(3)
    }

    fn len(&self) -> usize {
        self.weights() + self.c_out
    }
}

/// Encoder–decoder denoiser. Skip connections join every level except the
/// full-resolution one, so fine-scale noise has no shortcut to the output.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserNet {
    config: DenoiserConfig,
    params: Vec<f32>,
}

enum Step<T> {
    Conv {
        idx: usize,
        input: FeatureMap<T>,
        output: FeatureMap<T>,
        relu: bool,
    },
    Pool,
    Up,
    Save {
        lvl: usize,
    },
    Concat {
        lvl: usize,
        first: usize,
    },
}

/// Intermediate values of one forward pass, kept for the backward pass.
pub struct Tape<T> {
    steps: Vec<Step<T>>,
}

impl DenoiserNet {
    /// He-uniform weights, zero biases.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self, DenoiseError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = config.convs();
        let mut params = Vec::with_capacity(convs.iter().map(ConvSpec::len).sum());
        let last = convs.len() - 1;
        for (i, c) in convs.iter().enumerate() {
            let fan_in = (c.c_in * c.k.pow(3)) as f64;
            let gain = if i == last && config.residual {
                0.1
            } else {
                1.0
            };
            let a = gain * (6.0 / fan_in).sqrt();
            params.extend((0..c.weights()).map(|_| rng.random_range(-a..a) as f32));
            params.extend(std::iter::repeat_n(0.0f32, c.c_out));
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: DenoiserConfig, params: Vec<f32>) -> Result<Self, DenoiseError> {
        config.validate()?;
        let expected = config.convs().iter().map(ConvSpec::len).sum();
        if params.len() != expected {
            return Err(DenoiseError::ParamCount {
                expected,
                got: params.len(),
            });
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn check_dims(&self, dims: [usize; 3]) -> Result<(), DenoiseError> {
        let d = self.config.divisor();
        if dims.iter().any(|&n| n == 0 || n % d != 0) {
            return Err(DenoiseError::Dims { dims, divisor: d });
        }
        Ok(())
    }

    fn conv_params<T: Real>(
        &self,
        convs: &[ConvSpec],
        idx: usize,
        params: &[T],
    ) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let start: usize = convs[..idx].iter().map(ConvSpec::len).sum();
        let w = convs[idx].weights();
        debug_assert!(start + convs[idx].len() <= params.len());
        (start..start + w, start + w..start + convs[idx].len())
    }

    /// Runs the network with parameters `params` (same layout as [`Self::params`])
    /// and records a tape.
    pub fn forward_with<T: Real>(
        &self,
        params: &[T],
        input: &FeatureMap<T>,
    ) -> Result<(FeatureMap<T>, Tape<T>), DenoiseError> {
        self.check_dims(input.dims())?;
        if input.channels() != 1 {
            return Err(DenoiseError::BadConfig("denoiser takes one channel"));
        }
        let cfg = &self.config;
        let convs = cfg.convs();
        let mut steps = Vec::new();
        let mut idx = 0;
        let mut conv = |h: FeatureMap<T>, relu: bool, steps: &mut Vec<Step<T>>| {
            let (wr, br) = self.conv_params(&convs, idx, params);
            let spec = convs[idx];
            let mut out = conv3d(&h, &params[wr], Some(&params[br]), spec.c_out, spec.k);
            if relu {
                for v in out.data_mut() {
                    *v = v.max(T::zero());
                }
            }
            steps.push(Step::Conv {
                idx,
                input: h,
                output: out.clone(),
                relu,
            });
            idx += 1;
            out
        };
        let mut skips: Vec<Option<FeatureMap<T>>> = vec![None; cfg.levels + 1];
        let mut h = input.clone();
        for lvl in 0..=cfg.levels {
            if lvl > 0 {
                h = avg_pool2(&h);
                steps.push(Step::Pool);
            }
            for _ in 0..cfg.convs_per_level {
                h = conv(h, true, &mut steps);
            }
            if lvl > 0 && lvl < cfg.levels {
                skips[lvl] = Some(h.clone());
                steps.push(Step::Save { lvl });
            }
        }
        for lvl in (0..cfg.levels).rev() {
            h = upsample2(&h);
            steps.push(Step::Up);
            if lvl > 0 {
                let first = h.channels();
                h = concat(&h, skips[lvl].as_ref().expect("skip saved on the way down"));
                steps.push(Step::Concat { lvl, first });
            }
            for _ in 0..cfg.convs_per_level {
                h = conv(h, true, &mut steps);
            }
        }
        let mut out = conv(h, false, &mut steps);
        if cfg.residual {
            for (o, x) in out.data_mut().iter_mut().zip(input.data()) {
                *o = *o + *x;
            }
        }
        Ok((out, Tape { steps }))
    }

    /// Gradient of a scalar loss with respect to all parameters, given its
    /// gradient `grad_out` with respect to the network output.
    pub fn backward_with<T: Real>(
        &self,
        params: &[T],
        tape: Tape<T>,
        grad_out: &FeatureMap<T>,
    ) -> Vec<T> {
        let convs = self.config.convs();
        let mut grads = vec![T::zero(); params.len()];
        let mut skip_grads: Vec<Option<FeatureMap<T>>> = vec![None; self.config.levels + 1];
        let mut g = grad_out.clone();
        for step in tape.steps.into_iter().rev() {
            match step {
                Step::Conv {
                    idx,
                    input,
                    output,
                    relu,
                } => {
                    if relu {
                        for (gv, ov) in g.data_mut().iter_mut().zip(output.data()) {
                            if *ov <= T::zero() {
                                *gv = T::zero();
                            }
                        }
                    }
                    let spec = convs[idx];
                    let (wr, br) = self.conv_params(&convs, idx, params);
                    let need_input = idx > 0;
                    let cg = conv3d_backward(&input, &params[wr.clone()], &g, spec.k, need_input);
                    for (d, s) in grads[wr].iter_mut().zip(&cg.weight) {
                        *d = *d + *s;
                    }
                    for (d, s) in grads[br].iter_mut().zip(&cg.bias) {
                        *d = *d + *s;
                    }
                    if let Some(gi) = cg.input {
                        g = gi;
                    }
                }
                Step::Pool => g = avg_pool2_backward(&g),
                Step::Up => g = upsample2_backward(&g),
                Step::Concat { lvl, first } => {
                    let (a, b) = split(&g, first);
                    skip_grads[lvl] = Some(b);
                    g = a;
                }
                Step::Save { lvl } => {
                    let s = skip_grads[lvl]
                        .take()
                        .expect("concat precedes save in reverse");
                    for (d, v) in g.data_mut().iter_mut().zip(s.data()) {
                        *d = *d + *v;
                    }
                }
            }
        }
        grads
    }

    pub fn forward<T: Real>(&self, input: &FeatureMap<T>) -> Result<FeatureMap<T>, DenoiseError> {
        let p: Vec<T> = self.params.iter().map(|&v| T::of(v as f64)).collect();
        Ok(self.forward_with(&p, input)?.0)
    }
}

/// `Ψ(Ĩ)` in single precision.
pub fn denoiser_forward(net: &DenoiserNet, vol: &Volume3) -> Result<Volume3, DenoiseError> {
    let out = net.forward::<f32>(&FeatureMap::from_volume(vol))?;
    let mut v = out.channel_volume(0);
    v = Volume3::new(v.dims(), vol.spacing(), v.into_data())?;
    Ok(v)
}

/// Mean squared error between `Ψ(input)` and `target`, and its gradient with
/// respect to every parameter.
pub fn loss_psi<T: Real>(
    net: &DenoiserNet,
    params: &[T],
    input: &FeatureMap<T>,
    target: &FeatureMap<T>,
) -> Result<(f64, Vec<T>), DenoiseError> {
    if input.dims() != target.dims() || target.channels() != 1 {
        return Err(DenoiseError::BadConfig(
            "target must be one channel with the input's dims",
        ));
    }
    let (out, tape) = net.forward_with(params, input)?;
    let n = out.voxels() as f64;
    let mut loss = 0.0;
    let mut g = FeatureMap::zeros(out.dims(), 1);
    for ((gv, o), t) in g.data_mut().iter_mut().zip(out.data()).zip(target.data()) {
        let d = o.f64() - t.f64();
        loss += d * d;
        *gv = T::of(2.0 * d / n);
    }
    let grads = net.backward_with(params, tape, &g);
    Ok((loss / n, grads))
}

fn half(dims: [usize; 3]) -> [usize; 3] {
    [dims[0] / 2, dims[1] / 2, dims[2] / 2]
}

fn avg_pool2<T: Real>(x: &FeatureMap<T>) -> FeatureMap<T> {
    let [nx, ny, _] = x.dims();
    let d = half(x.dims());
    let mut out = FeatureMap::zeros(d, x.channels());
    let eighth = T::of(0.125);
    for c in 0..x.channels() {
        let src = x.channel(c);
        let dst = out.channel_mut(c);
        for z in 0..d[2] {
            for y in 0..d[1] {
                for xx in 0..d[0] {
                    let mut s = T::zero();
                    for (dz, dy, dx) in OCTANT {
                        s = s + src[(2 * xx + dx) + nx * ((2 * y + dy) + ny * (2 * z + dz))];
                    }
                    dst[xx + d[0] * (y + d[1] * z)] = s * eighth;
                }
            }
        }
    }
    out
}

fn avg_pool2_backward<T: Real>(g: &FeatureMap<T>) -> FeatureMap<T> {
    let d = g.dims();
    let full = [2 * d[0], 2 * d[1], 2 * d[2]];
    let mut out = FeatureMap::zeros(full, g.channels());
    let eighth = T::of(0.125);
    for c in 0..g.channels() {
        let src = g.channel(c);
        let dst = out.channel_mut(c);
        for z in 0..full[2] {
            for y in 0..full[1] {
                for x in 0..full[0] {
                    dst[x + full[0] * (y + full[1] * z)] =
                        src[x / 2 + d[0] * (y / 2 + d[1] * (z / 2))] * eighth;
                }
            }
        }
    }
    out
}

const OCTANT: [(usize, usize, usize); 8] = [
    (0, 0, 0),
    (0, 0, 1),
    (0, 1, 0),
    (0, 1, 1),
    (1, 0, 0),
    (1, 0, 1),
    (1, 1, 0),
    (1, 1, 1),
];

fn upsample2<T: Real>(x: &FeatureMap<T>) -> FeatureMap<T> {
    let d = x.dims();
    let full = [2 * d[0], 2 * d[1], 2 * d[2]];
    let mut out = FeatureMap::zeros(full, x.channels());
    for c in 0..x.channels() {
        let src = x.channel(c);
        let dst = out.channel_mut(c);
        for z in 0..full[2] {
            for y in 0..full[1] {
                for xx in 0..full[0] {
                    dst[xx + full[0] * (y + full[1] * z)] =
                        src[xx / 2 + d[0] * (y / 2 + d[1] * (z / 2))];
                }
            }
        }
    }
    out
}

fn upsample2_backward<T: Real>(g: &FeatureMap<T>) -> FeatureMap<T> {
    let mut out = avg_pool2(g);
    for v in out.data_mut() {
        *v = *v * T::of(8.0);
    }
    out
}

fn concat<T: Real>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> FeatureMap<T> {
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    FeatureMap::from_data(a.dims(), a.channels() + b.channels(), data)
}

fn split<T: Real>(x: &FeatureMap<T>, first: usize) -> (FeatureMap<T>, FeatureMap<T>) {
    let cut = first * x.voxels();
    (
        FeatureMap::from_data(x.dims(), first, x.data()[..cut].to_vec()),
        FeatureMap::from_data(x.dims(), x.channels() - first, x.data()[cut..].to_vec()),
    )
}
