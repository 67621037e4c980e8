//! Mean displacement fields: anything mapping `(x, p, dt)` to the
//! interval-averaged velocity and force, with a directional derivative.

use crate::error::{Error, Result};

/// Input direction for a forward-mode derivative.
#[derive(Clone, Debug, PartialEq)]
pub struct InputTangent {
    pub dx: Vec<f64>,
    pub dp: Vec<f64>,
    pub dt: f64,
}

/// Primal mean field and its directional derivative.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldJet {
    pub velocity: Vec<f64>,
    pub force: Vec<f64>,
    pub d_velocity: Vec<f64>,
    pub d_force: Vec<f64>,
}

pub trait FlowField {
    fn count(&self) -> usize;

    fn dims(&self) -> usize;

    /// Largest timestep the field is valid for.
    fn dt_max(&self) -> f64;

    /// `(v_bar, f_bar)` at `(x, p, dt)`.
    fn mean_field(&self, x: &[f64], p: &[f64], dt: f64) -> Result<(Vec<f64>, Vec<f64>)>;

    /// Primal plus the Jacobian-vector product along `tangent`.
    fn mean_field_jvp(
        &self,
        x: &[f64],
        p: &[f64],
        dt: f64,
        tangent: &InputTangent,
    ) -> Result<FieldJet>;

    fn check_inputs(&self, x: &[f64], p: &[f64]) -> Result<()> {
        let n = self.count() * self.dims();
        if x.len() != n || p.len() != n {
            return Err(Error::Shape {
                system: "flow field",
                expected: format!("{n} coordinates"),
                got: format!("{} positions, {} momenta", x.len(), p.len()),
            });
        }
        Ok(())
    }
}

/// Exact mean field of the unit-mass harmonic oscillator,
/// `u(x, p, dt) = (phi_dt(x, p) - (x, p)) / dt`, with its `dt -> 0` limit `(p, -omega^2 x)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OscillatorMeanField {
    pub omega: f64,
}

impl OscillatorMeanField {
    /// `(cos(w t) - 1) / t`, `sin(w t) / t` and their `t`-derivatives.
    fn kernels(&self, t: f64) -> [f64; 4] {
        let w = self.omega;
        let wt = w * t;
        if wt.abs() < 1e-2 {
            let (w2, t2) = (w * w, t * t);
            let a = -w2 * t / 2.0 + w2 * w2 * t * t2 / 24.0 - w2 * w2 * w2 * t * t2 * t2 / 720.0;
            let da = -w2 / 2.0 + w2 * w2 * t2 / 8.0 - w2 * w2 * w2 * t2 * t2 / 144.0;
            let s = w - w * w2 * t2 / 6.0 + w * w2 * w2 * t2 * t2 / 120.0
                - w * w2 * w2 * w2 * t2 * t2 * t2 / 5040.0;
            let ds = -w * w2 * t / 3.0 + w * w2 * w2 * t * t2 / 30.0
                - w * w2 * w2 * w2 * t * t2 * t2 / 840.0;
            [a, da, s, ds]
        } else {
            let (sn, cs) = wt.sin_cos();
            let a = (cs - 1.0) / t;
            let s = sn / t;
            let da = (-wt * sn - cs + 1.0) / (t * t);
            let ds = (wt * cs - sn) / (t * t);
            [a, da, s, ds]
        }
    }
}

impl FlowField for OscillatorMeanField {
    fn count(&self) -> usize {
        1
    }

    fn dims(&self) -> usize {
        1
    }

    fn dt_max(&self) -> f64 {
        f64::INFINITY
    }

    fn mean_field(&self, x: &[f64], p: &[f64], dt: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_inputs(x, p)?;
        let [a, _, s, _] = self.kernels(dt);
        let w = self.omega;
        Ok((
            vec![x[0] * a + p[0] * s / w],
            vec![-x[0] * w * s + p[0] * a],
        ))
    }

    fn mean_field_jvp(
        &self,
        x: &[f64],
        p: &[f64],
        dt: f64,
        tangent: &InputTangent,
    ) -> Result<FieldJet> {
        self.check_inputs(x, p)?;
        let [a, da, s, ds] = self.kernels(dt);
        let w = self.omega;
        let (x, p) = (x[0], p[0]);
        let (tx, tp, tt) = (tangent.dx[0], tangent.dp[0], tangent.dt);
        Ok(FieldJet {
            velocity: vec![x * a + p * s / w],
            force: vec![-x * w * s + p * a],
            d_velocity: vec![tx * a + tp * s / w + tt * (x * da + p * ds / w)],
            d_force: vec![-tx * w * s + tp * a + tt * (-x * w * ds + p * da)],
        })
    }
}
