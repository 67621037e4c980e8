//! MLP flow-map network `(x, p, dt) -> (v_bar, f_bar)`.
//!
//! The embedding is a sum of three two-layer MLPs over Gaussian random
//! Fourier features of `dt / dt_max`, the flattened positions and the
//! flattened momenta. A three-layer trunk feeds two two-layer heads.
//! Inputs and outputs pass through fixed affine normalizations.

mod field;
mod layers;

pub use field::{FieldJet, FlowField, InputTangent, OscillatorMeanField};
pub use layers::Activation;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use layers::{Mlp, MlpCache};

/// `(value - shift) / scale` on the way in, `shift + scale * value` on the way out.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub shift: f64,
    pub scale: f64,
}

impl Default for Affine {
    fn default() -> Self {
        Self {
            shift: 0.0,
            scale: 1.0,
        }
    }
}

impl Affine {
    /// Mean and standard deviation of `values` (scale 1 when degenerate).
    pub fn fit<'a>(values: impl Iterator<Item = &'a f64>) -> Self {
        let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
        for v in values {
            n += 1;
            sum += v;
            sq += v * v;
        }
        if n == 0 {
            return Self::default();
        }
        let mean = sum / n as f64;
        let std = (sq / n as f64 - mean * mean).max(0.0).sqrt();
        Self {
            shift: mean,
            scale: if std > 1e-12 { std } else { 1.0 },
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    #[serde(default)]
    pub position: Affine,
    #[serde(default)]
    pub momentum: Affine,
    #[serde(default)]
    pub velocity: Affine,
    #[serde(default)]
    pub force: Affine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub width: usize,
    pub fourier_features: usize,
    #[serde(default = "unit")]
    pub fourier_scale: f64,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub normalization: Normalization,
}

fn unit() -> f64 {
    1.0
}

fn default_activation() -> Activation {
    Activation::Gelu
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            width: 256,
            fourier_features: 256,
            fourier_scale: 1.0,
            activation: Activation::Gelu,
            normalization: Normalization::default(),
        }
    }
}

impl ArchConfig {
    pub fn with_width(width: usize) -> Self {
        Self {
            width,
            fourier_features: width,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    time: Mlp,
    position: Mlp,
    momentum: Mlp,
    trunk: Mlp,
    head_v: Mlp,
    head_f: Mlp,
    total: usize,
}

impl Layout {
    fn new(arch: &ArchConfig, n_coords: usize) -> Self {
        let h = arch.width;
        let mut off = 0;
        let time = Mlp::new(&[2 * arch.fourier_features, h, h], false, &mut off);
        let position = Mlp::new(&[n_coords, h, h], false, &mut off);
        let momentum = Mlp::new(&[n_coords, h, h], false, &mut off);
        let trunk = Mlp::new(&[h, h, h, h], true, &mut off);
        let head_v = Mlp::new(&[h, h, n_coords], false, &mut off);
        let head_f = Mlp::new(&[h, h, n_coords], false, &mut off);
        Self {
            time,
            position,
            momentum,
            trunk,
            head_v,
            head_f,
            total: off,
        }
    }

    fn mlps(&self) -> [&Mlp; 6] {
        [
            &self.time,
            &self.position,
            &self.momentum,
            &self.trunk,
            &self.head_v,
            &self.head_f,
        ]
    }
}

/// Closed-form parameter count of the architecture for `n_coords = N * d`.
pub fn parameter_count(arch: &ArchConfig, n_coords: usize) -> usize {
    let h = arch.width;
    let e = 2 * arch.fourier_features;
    let dense = |i: usize, o: usize| i * o + o;
    dense(e, h)
        + dense(h, h)
        + 2 * (dense(n_coords, h) + dense(h, h))
        + 3 * dense(h, h)
        + 2 * (dense(h, h) + dense(h, n_coords))
}

/// Batched network inputs; one row per example.
#[derive(Clone, Debug)]
pub struct BatchInput {
    pub x: Array2<f64>,
    pub p: Array2<f64>,
    pub t: Array1<f64>,
}

/// Tangent directions for a batch.
#[derive(Clone, Debug)]
pub struct BatchTangent {
    pub dx: Array2<f64>,
    pub dp: Array2<f64>,
    pub dt: Array1<f64>,
}

#[derive(Clone, Debug)]
pub struct BatchOutput {
    pub v: Array2<f64>,
    pub f: Array2<f64>,
    /// Directional derivatives, present when a tangent was pushed.
    pub dv: Option<Array2<f64>>,
    pub df: Option<Array2<f64>>,
}

/// Activations saved by a forward pass for the reverse sweep.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    t_scaled: Array1<f64>,
    time: MlpCache,
    position: MlpCache,
    momentum: MlpCache,
    trunk: MlpCache,
    head_v: MlpCache,
    head_f: MlpCache,
}

/// Gradients of a scalar with respect to the network inputs.
#[derive(Clone, Debug)]
pub struct InputGradient {
    pub x: Array2<f64>,
    pub p: Array2<f64>,
    pub t: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowNet {
    arch: ArchConfig,
    count: usize,
    dims: usize,
    dt_max: f64,
    freqs: Vec<f64>,
    params: Vec<f64>,
    layout: Layout,
}

impl FlowNet {
    /// Fan-in scaled Gaussian weights, zero biases, and frozen Fourier
    /// frequencies drawn from `N(0, fourier_scale^2)`.
    pub fn init<R: Rng + ?Sized>(
        arch: ArchConfig,
        count: usize,
        dims: usize,
        dt_max: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if arch.width == 0 || arch.fourier_features == 0 || count == 0 || dims == 0 {
            return Err(Error::Config(format!(
                "degenerate network shape {arch:?}, N={count}, d={dims}"
            )));
        }
        if !(dt_max > 0.0) || !(arch.fourier_scale > 0.0) {
            return Err(Error::Config(
                "dt_max and fourier_scale must be positive".into(),
            ));
        }
        let layout = Layout::new(&arch, count * dims);
        let mut params = vec![0.0; layout.total];
        for mlp in layout.mlps() {
            for layer in &mlp.layers {
                let std = (1.0 / layer.input as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                for w in &mut params[layer.offset..layer.offset + layer.input * layer.output] {
                    *w = normal.sample(rng);
                }
            }
        }
        let fnormal = Normal::new(0.0, arch.fourier_scale).expect("positive scale");
        let freqs = (0..arch.fourier_features)
            .map(|_| fnormal.sample(rng))
            .collect();
        Ok(Self {
            arch,
            count,
            dims,
            dt_max,
            freqs,
            params,
            layout,
        })
    }

    /// Rebuilds a network from stored parts (checkpoint loading).
    pub fn from_parts(
        arch: ArchConfig,
        count: usize,
        dims: usize,
        dt_max: f64,
        freqs: Vec<f64>,
        params: Vec<f64>,
    ) -> Result<Self> {
        let layout = Layout::new(&arch, count * dims);
        if params.len() != layout.total || freqs.len() != arch.fourier_features {
            return Err(Error::Format(format!(
                "expected {} parameters and {} frequencies, got {} and {}",
                layout.total,
                arch.fourier_features,
                params.len(),
                freqs.len()
            )));
        }
        Ok(Self {
            arch,
            count,
            dims,
            dt_max,
            freqs,
            params,
            layout,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn n_coords(&self) -> usize {
        self.count * self.dims
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn check_batch(&self, input: &BatchInput) -> Result<()> {
        let n = self.n_coords();
        let b = input.t.len();
        if input.x.dim() != (b, n) || input.p.dim() != (b, n) {
            return Err(Error::Shape {
                system: "flow net",
                expected: format!("({b}, {n}) inputs"),
                got: format!("x {:?}, p {:?}", input.x.dim(), input.p.dim()),
            });
        }
        Ok(())
    }

    /// Fourier features of `t / dt_max` and, with `dt`, their tangent.
    fn time_features(
        &self,
        t: ArrayView1<f64>,
        dt: Option<ArrayView1<f64>>,
    ) -> (Array1<f64>, Array2<f64>, Option<Array2<f64>>) {
        let e = self.freqs.len();
        let scaled = t.mapv(|v| v / self.dt_max);
        let mut feats = Array2::zeros((t.len(), 2 * e));
        let mut tangent = dt.map(|_| Array2::zeros((t.len(), 2 * e)));
        for (b, &u) in scaled.iter().enumerate() {
            let du = dt.map(|d| d[b] / self.dt_max);
            for (k, &w) in self.freqs.iter().enumerate() {
                let arg = 2.0 * PI * w * u;
                let (s, c) = arg.sin_cos();
                feats[(b, k)] = s;
                feats[(b, e + k)] = c;
                if let (Some(tan), Some(du)) = (tangent.as_mut(), du) {
                    tan[(b, k)] = 2.0 * PI * w * c * du;
                    tan[(b, e + k)] = -2.0 * PI * w * s * du;
                }
            }
        }
        (scaled, feats, tangent)
    }

    fn run(
        &self,
        input: &BatchInput,
        tangent: Option<&BatchTangent>,
        cache: Option<&mut ForwardCache>,
    ) -> BatchOutput {
        let act = self.arch.activation;
        let norm = &self.arch.normalization;
        let params = &self.params;
        let (scaled_t, feats, dfeats) =
            self.time_features(input.t.view(), tangent.map(|t| t.dt.view()));
        let xin = input
            .x
            .mapv(|v| (v - norm.position.shift) / norm.position.scale);
        let pin = input
            .p
            .mapv(|v| (v - norm.momentum.shift) / norm.momentum.scale);
        let dxin = tangent.map(|t| &t.dx / norm.position.scale);
        let dpin = tangent.map(|t| &t.dp / norm.momentum.scale);

        let mut caches = cache;
        if let Some(c) = caches.as_deref_mut() {
            c.t_scaled = scaled_t;
        }
        macro_rules! slot {
            ($field:ident) => {
                caches.as_deref_mut().map(|c| &mut c.$field)
            };
        }
        let (et, det) = self
            .layout
            .time
            .forward(params, act, feats, dfeats, slot!(time));
        let (ex, dex) = self
            .layout
            .position
            .forward(params, act, xin, dxin, slot!(position));
        let (ep, dep) = self
            .layout
            .momentum
            .forward(params, act, pin, dpin, slot!(momentum));
        let h = et + &ex + &ep;
        let dh = match (det, dex, dep) {
            (Some(a), Some(b), Some(c)) => Some(a + &b + &c),
            _ => None,
        };
        let (z, dz) = self.layout.trunk.forward(params, act, h, dh, slot!(trunk));
        let (v, dv) = self
            .layout
            .head_v
            .forward(params, act, z.clone(), dz.clone(), slot!(head_v));
        let (f, df) = self
            .layout
            .head_f
            .forward(params, act, z, dz, slot!(head_f));
        BatchOutput {
            v: v.mapv(|o| norm.velocity.shift + norm.velocity.scale * o),
            f: f.mapv(|o| norm.force.shift + norm.force.scale * o),
            dv: dv.map(|d| d * norm.velocity.scale),
            df: df.map(|d| d * norm.force.scale),
        }
    }

    pub fn forward_batch(&self, input: &BatchInput) -> Result<BatchOutput> {
        self.check_batch(input)?;
        Ok(self.run(input, None, None))
    }

    pub fn jvp_batch(&self, input: &BatchInput, tangent: &BatchTangent) -> Result<BatchOutput> {
        self.check_batch(input)?;
        self.check_tangent(input, tangent)?;
        Ok(self.run(input, Some(tangent), None))
    }

    fn check_tangent(&self, input: &BatchInput, tangent: &BatchTangent) -> Result<()> {
        if tangent.dx.dim() != input.x.dim()
            || tangent.dp.dim() != input.p.dim()
            || tangent.dt.len() != input.t.len()
        {
            return Err(Error::Shape {
                system: "flow net",
                expected: "tangent shapes equal to input shapes".into(),
                got: format!(
                    "dx {:?}, dp {:?}, dt {}",
                    tangent.dx.dim(),
                    tangent.dp.dim(),
                    tangent.dt.len()
                ),
            });
        }
        Ok(())
    }

    /// Forward pass that records activations for [`FlowNet::backward_batch`],
    /// optionally pushing a tangent through the same pass.
    pub fn forward_cached(
        &self,
        input: &BatchInput,
        tangent: Option<&BatchTangent>,
    ) -> Result<(BatchOutput, ForwardCache)> {
        self.check_batch(input)?;
        if let Some(t) = tangent {
            self.check_tangent(input, t)?;
        }
        let mut cache = ForwardCache {
            t_scaled: Array1::zeros(0),
            time: MlpCache::default(),
            position: MlpCache::default(),
            momentum: MlpCache::default(),
            trunk: MlpCache::default(),
            head_v: MlpCache::default(),
            head_f: MlpCache::default(),
        };
        let out = self.run(input, tangent, Some(&mut cache));
        Ok((out, cache))
    }

    /// Reverse sweep for the output cotangent `(gv, gf)`. Returns the
    /// parameter gradient (flat, same layout as [`FlowNet::params`]) and the
    /// gradient with respect to the inputs.
    pub fn backward_batch(
        &self,
        cache: &ForwardCache,
        gv: &Array2<f64>,
        gf: &Array2<f64>,
    ) -> Result<(Vec<f64>, InputGradient)> {
        let b = cache.t_scaled.len();
        let n = self.n_coords();
        if gv.dim() != (b, n) || gf.dim() != (b, n) {
            return Err(Error::Shape {
                system: "flow net",
                expected: format!("({b}, {n}) cotangents"),
                got: format!("{:?}, {:?}", gv.dim(), gf.dim()),
            });
        }
        let act = self.arch.activation;
        let norm = &self.arch.normalization;
        let params = &self.params;
        let mut grad = vec![0.0; self.params.len()];
        let gv = gv * norm.velocity.scale;
        let gf = gf * norm.force.scale;
        let gz = self
            .layout
            .head_v
            .backward(params, act, &cache.head_v, gv, &mut grad)
            + &self
                .layout
                .head_f
                .backward(params, act, &cache.head_f, gf, &mut grad);
        let gh = self
            .layout
            .trunk
            .backward(params, act, &cache.trunk, gz, &mut grad);
        let gx = self
            .layout
            .position
            .backward(params, act, &cache.position, gh.clone(), &mut grad)
            / norm.position.scale;
        let gp = self
            .layout
            .momentum
            .backward(params, act, &cache.momentum, gh.clone(), &mut grad)
            / norm.momentum.scale;
        let gfeat = self
            .layout
            .time
            .backward(params, act, &cache.time, gh, &mut grad);

        let e = self.freqs.len();
        let mut gt = Array1::zeros(b);
        for (bi, &u) in cache.t_scaled.iter().enumerate() {
            let mut acc = 0.0;
            for (k, &w) in self.freqs.iter().enumerate() {
                let (s, c) = (2.0 * PI * w * u).sin_cos();
                acc += 2.0 * PI * w * (gfeat[(bi, k)] * c - gfeat[(bi, e + k)] * s);
            }
            gt[bi] = acc / self.dt_max;
        }
        Ok((
            grad,
            InputGradient {
                x: gx,
                p: gp,
                t: gt,
            },
        ))
    }

    fn single(&self, x: &[f64], p: &[f64], dt: f64) -> Result<BatchInput> {
        self.check_inputs(x, p)?;
        let n = self.n_coords();
        Ok(BatchInput {
            x: Array2::from_shape_vec((1, n), x.to_vec()).expect("shape"),
            p: Array2::from_shape_vec((1, n), p.to_vec()).expect("shape"),
            t: Array1::from_elem(1, dt),
        })
    }

    pub fn forward(&self, x: &[f64], p: &[f64], dt: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let out = self.forward_batch(&self.single(x, p, dt)?)?;
        Ok((
            out.v.into_raw_vec_and_offset().0,
            out.f.into_raw_vec_and_offset().0,
        ))
    }

    pub fn forward_with_tangent(
        &self,
        x: &[f64],
        p: &[f64],
        dt: f64,
        tangent: &InputTangent,
    ) -> Result<FieldJet> {
        let input = self.single(x, p, dt)?;
        let n = self.n_coords();
        if tangent.dx.len() != n || tangent.dp.len() != n {
            return Err(Error::Shape {
                system: "flow net",
                expected: format!("{n}-component tangents"),
                got: format!("{}, {}", tangent.dx.len(), tangent.dp.len()),
            });
        }
        let t = BatchTangent {
            dx: Array2::from_shape_vec((1, n), tangent.dx.clone()).expect("shape"),
            dp: Array2::from_shape_vec((1, n), tangent.dp.clone()).expect("shape"),
            dt: Array1::from_elem(1, tangent.dt),
        };
        let out = self.jvp_batch(&input, &t)?;
        let flat = |a: Array2<f64>| a.into_raw_vec_and_offset().0;
        Ok(FieldJet {
            velocity: flat(out.v),
            force: flat(out.f),
            d_velocity: flat(out.dv.expect("tangent pushed")),
            d_force: flat(out.df.expect("tangent pushed")),
        })
    }

    /// Gradient of `<(cv, cf), forward(x, p, dt)>` with respect to all parameters.
    pub fn backward(
        &self,
        x: &[f64],
        p: &[f64],
        dt: f64,
        cv: &[f64],
        cf: &[f64],
    ) -> Result<Vec<f64>> {
        let input = self.single(x, p, dt)?;
        let (_, cache) = self.forward_cached(&input, None)?;
        let n = self.n_coords();
        if cv.len() != n || cf.len() != n {
            return Err(Error::Shape {
                system: "flow net",
                expected: format!("{n}-component cotangents"),
                got: format!("{}, {}", cv.len(), cf.len()),
            });
        }
        let gv = Array2::from_shape_vec((1, n), cv.to_vec()).expect("shape");
        let gf = Array2::from_shape_vec((1, n), cf.to_vec()).expect("shape");
        Ok(self.backward_batch(&cache, &gv, &gf)?.0)
    }
}

impl FlowField for FlowNet {
    fn count(&self) -> usize {
        self.count
    }

    fn dims(&self) -> usize {
        self.dims
    }

    fn dt_max(&self) -> f64 {
        self.dt_max
    }

    fn mean_field(&self, x: &[f64], p: &[f64], dt: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        self.forward(x, p, dt)
    }

    fn mean_field_jvp(
        &self,
        x: &[f64],
        p: &[f64],
        dt: f64,
        tangent: &InputTangent,
    ) -> Result<FieldJet> {
        self.forward_with_tangent(x, p, dt, tangent)
    }
}

/// Stacks per-example rows into a batch matrix.
pub fn stack_rows<'a>(rows: impl ExactSizeIterator<Item = &'a [f64]>, width: usize) -> Array2<f64> {
    let n = rows.len();
    let mut out = Array2::zeros((n, width));
    for (mut dst, src) in out.axis_iter_mut(Axis(0)).zip(rows) {
        dst.assign(&ArrayView1::from(src));
    }
    out
}

/// Row `i` of a batch matrix as a slice.
pub fn row(a: &ArrayView2<f64>, i: usize) -> Vec<f64> {
    a.row(i).to_vec()
}
