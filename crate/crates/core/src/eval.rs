//! Rollout metrics against reference trajectories.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrate::{hfm_step, Trajectory};
use crate::net::FlowField;
use crate::state::PhaseState;

/// Relative tolerance (in units of the coarse timestep) for matching times.
pub const TIME_MATCH_TOL: f64 = 1e-9;

/// Default number of histogram bins for [`distance_hist_mae`].
pub const DEFAULT_BINS: usize = 200;

fn check_shapes(a: &PhaseState, b: &PhaseState) -> Result<()> {
    if a.count() != b.count() || a.dims() != b.dims() {
        return Err(Error::Mismatch(format!(
            "{} particles in {}D vs {} particles in {}D",
            a.count(),
            a.dims(),
            b.count(),
            b.dims()
        )));
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Root mean over particles of the squared displacement `|a_i - b_i|^2`.
pub fn rmsd(a: &[f64], b: &[f64], count: usize) -> f64 {
    (sq_dist(a, b) / count as f64).sqrt()
}

/// Index of the reference state at time `t`, if one lies within tolerance.
fn match_time(reference: &Trajectory, t: f64, tol: f64) -> Option<usize> {
    let t0 = reference.start_time();
    let k = if reference.dt > 0.0 {
        ((t - t0) / reference.dt).round()
    } else {
        0.0
    };
    if k < 0.0 || k as usize >= reference.len() {
        return None;
    }
    let k = k as usize;
    ((reference.times[k] - t).abs() <= tol).then_some(k)
}

/// Mean over the states of `pred` (and over particles) of the squared
/// position error against the reference at the same time. The reference
/// may be sampled more densely.
pub fn trajectory_mse(pred: &Trajectory, reference: &Trajectory) -> Result<f64> {
    check_shapes(&pred.states[0], &reference.states[0])?;
    let tol = TIME_MATCH_TOL * pred.dt.max(f64::MIN_POSITIVE);
    let end_pred = *pred.times.last().expect("nonempty");
    let end_ref = *reference.times.last().expect("nonempty");
    if (end_pred - end_ref).abs() > tol {
        return Err(Error::Mismatch(format!(
            "final times differ: {end_pred} vs {end_ref}"
        )));
    }
    let count = pred.states[0].count() as f64;
    let mut total = 0.0;
    for (s, &t) in pred.states.iter().zip(&pred.times) {
        let k = match_time(reference, t, tol)
            .ok_or_else(|| Error::Mismatch(format!("no reference state at t = {t}")))?;
        total += sq_dist(s.positions(), reference.states[k].positions()) / count;
    }
    Ok(total / pred.len() as f64)
}

/// Squared position error of the last state only, per particle.
pub fn final_position_mse(pred: &PhaseState, reference: &PhaseState) -> Result<f64> {
    check_shapes(pred, reference)?;
    Ok(sq_dist(pred.positions(), reference.positions()) / pred.count() as f64)
}

/// Final-state RMSD divided by the accumulated step-to-step RMSD of the
/// reference, for positions and momenta separately.
pub fn normalized_rmsd(pred_final: &PhaseState, reference: &Trajectory) -> Result<(f64, f64)> {
    if reference.len() < 2 {
        return Err(Error::InvalidState(
            "reference trajectory needs at least two states".into(),
        ));
    }
    let last = reference.last();
    check_shapes(pred_final, last)?;
    let n = last.count();
    let (mut path_x, mut path_p) = (0.0, 0.0);
    for w in reference.states.windows(2) {
        path_x += rmsd(w[1].positions(), w[0].positions(), n);
        path_p += rmsd(w[1].momenta(), w[0].momenta(), n);
    }
    if !(path_x > 0.0) || !(path_p > 0.0) {
        return Err(Error::InvalidState(
            "reference trajectory has zero path length".into(),
        ));
    }
    Ok((
        rmsd(pred_final.positions(), last.positions(), n) / path_x,
        rmsd(pred_final.momenta(), last.momenta(), n) / path_p,
    ))
}

fn pair_distances(traj: &Trajectory) -> impl Iterator<Item = f64> + '_ {
    traj.states.iter().flat_map(|s| {
        let (n, d) = (s.count(), s.dims());
        let x = s.positions();
        (0..n).flat_map(move |i| {
            (i + 1..n).map(move |j| sq_dist(&x[i * d..(i + 1) * d], &x[j * d..(j + 1) * d]).sqrt())
        })
    })
}

/// Histogram density of pair distances over all frames, normalized so that
/// it integrates to one over `[0, r_max]` when no distance exceeds `r_max`.
pub fn distance_histogram(traj: &Trajectory, bins: usize, r_max: f64) -> Vec<f64> {
    let width = r_max / bins as f64;
    let mut h = vec![0.0; bins];
    let mut total = 0usize;
    for r in pair_distances(traj) {
        total += 1;
        let k = (r / width) as usize;
        if k < bins {
            h[k] += 1.0;
        }
    }
    if total > 0 {
        h.iter_mut().for_each(|v| *v /= total as f64 * width);
    }
    h
}

/// `sum |h_a - h_b| * bin_width` of the frame-averaged pair-distance
/// densities. Without `r_max`, the range is 1.1 times the largest distance
/// seen in either trajectory.
pub fn distance_hist_mae(
    a: &Trajectory,
    b: &Trajectory,
    bins: usize,
    r_max: Option<f64>,
) -> Result<f64> {
    check_shapes(&a.states[0], &b.states[0])?;
    if a.states[0].count() < 2 || bins == 0 {
        return Err(Error::InvalidState(
            "distance histograms need N >= 2 and at least one bin".into(),
        ));
    }
    let r_max = match r_max {
        Some(r) if r > 0.0 => r,
        Some(r) => return Err(Error::Config(format!("r_max must be positive, got {r}"))),
        None => {
            1.1 * pair_distances(a)
                .chain(pair_distances(b))
                .fold(0.0_f64, f64::max)
        }
    };
    if !(r_max > 0.0) {
        return Ok(0.0);
    }
    let width = r_max / bins as f64;
    let ha = distance_histogram(a, bins, r_max);
    let hb = distance_histogram(b, bins, r_max);
    Ok(ha.iter().zip(&hb).map(|(x, y)| (x - y).abs()).sum::<f64>() * width)
}

/// RMSD between one full step and two half steps, for positions and momenta.
pub fn semigroup_error(field: &dyn FlowField, state: &PhaseState, dt: f64) -> Result<(f64, f64)> {
    let full = hfm_step(field, state, dt)?;
    let halves = hfm_step(field, &hfm_step(field, state, 0.5 * dt)?, 0.5 * dt)?;
    let n = state.count();
    Ok((
        rmsd(full.positions(), halves.positions(), n),
        rmsd(full.momenta(), halves.momenta(), n),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Drift {
    /// Max relative total-energy deviation (absolute when `|E0| < 1e-8`).
    pub energy: f64,
    /// Max Euclidean deviation of the angular momentum vector.
    pub angular_momentum: f64,
    /// Max Euclidean deviation of the total momentum.
    pub momentum: f64,
}

pub fn conservation_drift(traj: &Trajectory) -> Drift {
    let first = &traj.diagnostics[0];
    let e0 = first.total_energy;
    let denom = if e0.abs() < 1e-8 { 1.0 } else { e0.abs() };
    let mut drift = Drift {
        energy: 0.0,
        angular_momentum: 0.0,
        momentum: 0.0,
    };
    for d in &traj.diagnostics {
        drift.energy = drift.energy.max((d.total_energy - e0).abs() / denom);
        drift.angular_momentum = drift
            .angular_momentum
            .max(sq_dist(&d.angular_momentum, &first.angular_momentum).sqrt());
        drift.momentum = drift
            .momentum
            .max(sq_dist(&d.momentum, &first.momentum).sqrt());
    }
    drift
}

/// One metric value with the metadata that identifies it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Label of the compared trajectory pair.
    pub pair: String,
    pub name: String,
    pub value: f64,
    pub system: String,
    pub dt: f64,
    pub n_steps: usize,
    pub seed: u64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "pair,metric,system,dt,n_steps,seed,value";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:e}",
            self.pair, self.name, self.system, self.dt, self.n_steps, self.seed, self.value
        )
    }
}

pub fn metrics_csv(reports: &[MetricReport]) -> String {
    let mut out = String::from(MetricReport::CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}
