//! Dense layers and MLP stacks over a flat parameter vector.
//!
//! Each layer evaluates its primal and, optionally, a forward-mode tangent
//! alongside it. Reverse mode replays the cached layer inputs.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// tanh approximation of GELU
    Gelu,
    Silu,
    Tanh,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

impl Activation {
    pub fn code(self) -> u32 {
        match self {
            Activation::Gelu => 0,
            Activation::Silu => 1,
            Activation::Tanh => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Gelu),
            1 => Some(Activation::Silu),
            2 => Some(Activation::Tanh),
            _ => None,
        }
    }

    #[inline]
    pub fn value(self, z: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * z * (1.0 + (GELU_K * (z + GELU_C * z * z * z)).tanh()),
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Tanh => z.tanh(),
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let t = (GELU_K * (z + GELU_C * z * z * z)).tanh();
                0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * z * z)
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Affine layer `y = x W^T + b`, with `W` stored row-major `(output, input)`
/// starting at `offset` in the parameter vector, followed by the bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Dense {
    pub input: usize,
    pub output: usize,
    pub offset: usize,
}

impl Dense {
    pub fn param_count(&self) -> usize {
        self.output * self.input + self.output
    }

    fn weight<'a>(&self, params: &'a [f64]) -> ArrayView2<'a, f64> {
        let n = self.output * self.input;
        ArrayView2::from_shape(
            (self.output, self.input),
            &params[self.offset..self.offset + n],
        )
        .expect("layout")
    }

    fn bias<'a>(&self, params: &'a [f64]) -> ArrayView1<'a, f64> {
        let start = self.offset + self.output * self.input;
        ArrayView1::from(&params[start..start + self.output])
    }

    fn forward(&self, params: &[f64], x: &Array2<f64>) -> Array2<f64> {
        let mut y = Array2::zeros((x.nrows(), self.output));
        general_mat_mul(1.0, x, &self.weight(params).t(), 0.0, &mut y);
        y += &self.bias(params);
        y
    }

    fn tangent(&self, params: &[f64], dx: &Array2<f64>) -> Array2<f64> {
        dx.dot(&self.weight(params).t())
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    fn backward(
        &self,
        params: &[f64],
        x: &Array2<f64>,
        gy: &Array2<f64>,
        grad: &mut [f64],
    ) -> Array2<f64> {
        let n = self.output * self.input;
        let (gw, gb) = grad[self.offset..self.offset + n + self.output].split_at_mut(n);
        let mut gw = ArrayViewMut2::from_shape((self.output, self.input), gw).expect("layout");
        general_mat_mul(1.0, &gy.t(), x, 1.0, &mut gw);
        let mut gb = ArrayViewMut1::from(gb);
        gb += &gy.sum_axis(Axis(0));
        gy.dot(&self.weight(params))
    }
}

/// Stack of dense layers with the activation between them, and after the
/// last one when `activate_last` is set.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Mlp {
    pub layers: Vec<Dense>,
    pub activate_last: bool,
}

#[derive(Clone, Debug, Default)]
pub(crate) struct MlpCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl Mlp {
    /// Lays out `dims.len() - 1` layers starting at `*offset`, advancing it.
    pub fn new(dims: &[usize], activate_last: bool, offset: &mut usize) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| {
                let d = Dense {
                    input: w[0],
                    output: w[1],
                    offset: *offset,
                };
                *offset += d.param_count();
                d
            })
            .collect();
        Self {
            layers,
            activate_last,
        }
    }

    fn activated(&self, layer: usize) -> bool {
        layer + 1 < self.layers.len() || self.activate_last
    }

    /// Primal pass, with the tangent pushed alongside when given. The cache
    /// is only filled when `cache` is `Some`.
    pub fn forward(
        &self,
        params: &[f64],
        act: Activation,
        mut x: Array2<f64>,
        mut dx: Option<Array2<f64>>,
        mut cache: Option<&mut MlpCache>,
    ) -> (Array2<f64>, Option<Array2<f64>>) {
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(params, &x);
            let dz = dx.as_ref().map(|d| layer.tangent(params, d));
            let (a, da) = if self.activated(l) {
                let a = z.mapv(|v| act.value(v));
                let da = dz.map(|mut d| {
                    d.zip_mut_with(&z, |dv, &zv| *dv *= act.derivative(zv));
                    d
                });
                (a, da)
            } else {
                (z.clone(), dz)
            };
            if let Some(c) = cache.as_deref_mut() {
                c.inputs.push(x);
                c.pre.push(z);
            }
            x = a;
            dx = da;
        }
        (x, dx)
    }

    pub fn backward(
        &self,
        params: &[f64],
        act: Activation,
        cache: &MlpCache,
        mut g: Array2<f64>,
        grad: &mut [f64],
    ) -> Array2<f64> {
        for (l, layer) in self.layers.iter().enumerate().rev() {
            if self.activated(l) {
                g.zip_mut_with(&cache.pre[l], |gv, &zv| *gv *= act.derivative(zv));
            }
            g = layer.backward(params, &cache.inputs[l], &g, grad);
        }
        g
    }
}
