//! Mean-flow consistency objective.
//!
//! The target for `u(x, p, dt)` is `(v, f) + dt * d/ds u(x + s v, p + s f, dt - s)`
//! at `s = 0`, treated as a constant. Gradients flow only through the
//! primal prediction.

use ndarray::{Array1, Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{BatchInput, BatchTangent, FlowField, FlowNet, InputTangent};
use crate::sampling::Sample;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    #[serde(default = "one")]
    pub lambda_v: f64,
    #[serde(default = "one")]
    pub lambda_f: f64,
    #[serde(default = "default_c")]
    pub c: f64,
    #[serde(default = "default_p")]
    pub hub_p: f64,
    #[serde(default = "yes")]
    pub mass_weight_velocity: bool,
    /// Scale each term by `(raw + c)^-p`; off means unit weights.
    #[serde(default = "yes")]
    pub adaptive: bool,
}

fn one() -> f64 {
    1.0
}
fn default_c() -> f64 {
    1e-3
}
fn default_p() -> f64 {
    0.5
}
fn yes() -> bool {
    true
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_v: 1.0,
            lambda_f: 1.0,
            c: 1e-3,
            hub_p: 0.5,
            mass_weight_velocity: true,
            adaptive: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0)
            || !(self.lambda_v >= 0.0)
            || !(self.lambda_f >= 0.0)
            || !self.hub_p.is_finite()
        {
            return Err(Error::Config(format!("invalid loss config {self:?}")));
        }
        Ok(())
    }

    fn weight(&self, raw: f64) -> f64 {
        if self.adaptive {
            adaptive_weight(raw, self)
        } else {
            1.0
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    /// `w_v * raw_velocity`
    pub velocity_term: f64,
    /// `w_f * raw_force`
    pub force_term: f64,
    pub raw_velocity: f64,
    pub raw_force: f64,
    pub w_v: f64,
    pub w_f: f64,
}

/// `(raw + c)^-p`, a constant with respect to the parameters.
pub fn adaptive_weight(raw_mse: f64, cfg: &LossConfig) -> f64 {
    (raw_mse + cfg.c).powf(-cfg.hub_p)
}

/// Consistency target `(v, f) + dt * J (v, f, -1)` for one sample.
pub fn build_target(field: &dyn FlowField, sample: &Sample) -> Result<(Vec<f64>, Vec<f64>)> {
    let tangent = InputTangent {
        dx: sample.velocity.clone(),
        dp: sample.force.clone(),
        dt: -1.0,
    };
    let jet = field.mean_field_jvp(
        sample.state.positions(),
        sample.state.momenta(),
        sample.timestep,
        &tangent,
    )?;
    let dt = sample.timestep;
    let v = sample
        .velocity
        .iter()
        .zip(&jet.d_velocity)
        .map(|(a, b)| a + dt * b)
        .collect();
    let f = sample
        .force
        .iter()
        .zip(&jet.d_force)
        .map(|(a, b)| a + dt * b)
        .collect();
    Ok((v, f))
}

fn finish(raw_v: f64, raw_f: f64, cfg: &LossConfig) -> LossReport {
    let (w_v, w_f) = (cfg.weight(raw_v), cfg.weight(raw_f));
    let velocity_term = w_v * raw_v;
    let force_term = w_f * raw_f;
    LossReport {
        total: cfg.lambda_v * velocity_term + cfg.lambda_f * force_term,
        velocity_term,
        force_term,
        raw_velocity: raw_v,
        raw_force: raw_f,
        w_v,
        w_f,
    }
}

fn check_batch(samples: &[Sample], n: usize) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if let Some(s) = samples
        .iter()
        .find(|s| s.state.len() != n || s.force.len() != n)
    {
        return Err(Error::Shape {
            system: "loss batch",
            expected: format!("{n} coordinates per sample"),
            got: format!("{}", s.state.len()),
        });
    }
    Ok(())
}

/// Loss value for any mean field, evaluated sample by sample.
pub fn evaluate_loss(
    field: &dyn FlowField,
    samples: &[Sample],
    cfg: &LossConfig,
) -> Result<LossReport> {
    let n = field.count() * field.dims();
    check_batch(samples, n)?;
    let dims = field.dims();
    let (mut raw_v, mut raw_f) = (0.0, 0.0);
    for s in samples {
        let (tv, tf) = build_target(field, s)?;
        let (pv, pf) = field.mean_field(s.state.positions(), s.state.momenta(), s.timestep)?;
        for k in 0..n {
            let m = if cfg.mass_weight_velocity {
                s.state.masses()[k / dims]
            } else {
                1.0
            };
            raw_v += m * (pv[k] - tv[k]).powi(2);
            raw_f += (pf[k] - tf[k]).powi(2);
        }
    }
    let norm = (samples.len() * n) as f64;
    Ok(finish(raw_v / norm, raw_f / norm, cfg))
}

/// Stacks samples into a network batch and the consistency tangent `(v, f, -1)`.
pub fn batch_of(samples: &[Sample], n: usize) -> (BatchInput, BatchTangent) {
    let b = samples.len();
    let mut x = Array2::zeros((b, n));
    let mut p = Array2::zeros((b, n));
    let mut dx = Array2::zeros((b, n));
    let mut dp = Array2::zeros((b, n));
    let mut t = Array1::zeros(b);
    for (i, s) in samples.iter().enumerate() {
        for k in 0..n {
            x[(i, k)] = s.state.positions()[k];
            p[(i, k)] = s.state.momenta()[k];
            dx[(i, k)] = s.velocity[k];
            dp[(i, k)] = s.force[k];
        }
        t[i] = s.timestep;
    }
    (
        BatchInput { x, p, t },
        BatchTangent {
            dx,
            dp,
            dt: Array1::from_elem(b, -1.0),
        },
    )
}

/// Per-coordinate velocity weights (particle masses, or ones).
fn velocity_weights(samples: &[Sample], n: usize, dims: usize, mass_weight: bool) -> Array2<f64> {
    let mut w = Array2::ones((samples.len(), n));
    if mass_weight {
        for (i, s) in samples.iter().enumerate() {
            for k in 0..n {
                w[(i, k)] = s.state.masses()[k / dims];
            }
        }
    }
    w
}

/// Loss and its parameter gradient from a single batched pass. The target
/// is read off the tangent carried by the same forward pass and then held fixed.
pub fn loss_and_grad(
    net: &FlowNet,
    samples: &[Sample],
    cfg: &LossConfig,
) -> Result<(LossReport, Vec<f64>)> {
    let n = net.n_coords();
    check_batch(samples, n)?;
    let (input, tangent) = batch_of(samples, n);
    let (out, cache) = net.forward_cached(&input, Some(&tangent))?;
    let dtcol = input.t.view().insert_axis(ndarray::Axis(1));
    let tgt_v = &tangent.dx + &(out.dv.as_ref().expect("tangent pushed") * &dtcol);
    let tgt_f = &tangent.dp + &(out.df.as_ref().expect("tangent pushed") * &dtcol);
    let rv = &out.v - &tgt_v;
    let rf = &out.f - &tgt_f;
    let mw = velocity_weights(samples, n, FlowField::dims(net), cfg.mass_weight_velocity);
    let norm = (samples.len() * n) as f64;
    let raw_v = Zip::from(&rv)
        .and(&mw)
        .fold(0.0, |acc, r, m| acc + m * r * r)
        / norm;
    let raw_f = rf.iter().map(|r| r * r).sum::<f64>() / norm;
    let report = finish(raw_v, raw_f, cfg);
    if !report.total.is_finite() {
        return Err(Error::NonFinite(format!("loss {report:?}")));
    }
    let gv = &rv * &mw * (2.0 * cfg.lambda_v * report.w_v / norm);
    let gf = rf * (2.0 * cfg.lambda_f * report.w_f / norm);
    let (grad, _) = net.backward_batch(&cache, &gv, &gf)?;
    Ok((report, grad))
}
