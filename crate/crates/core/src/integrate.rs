//! Velocity Verlet, the learned one-step update, and filtered rollouts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{self, ConservationTargets, FilterDiagnostics, FilterSpec};
use crate::net::FlowField;
use crate::rng::StreamRng;
use crate::state::PhaseState;
use crate::systems::{Potential, SystemParams};

/// Kick-drift-kick with the force evaluated at `state`.
pub fn vv_step(sys: &SystemParams, state: &PhaseState, dt: f64) -> Result<PhaseState> {
    let f0 = sys.force(state)?;
    Ok(vv_step_with_force(sys, state, &f0, dt)?.0)
}

/// One Verlet step given the force at `state`; also returns the force at the new positions.
fn vv_step_with_force(
    sys: &SystemParams,
    state: &PhaseState,
    f0: &[f64],
    dt: f64,
) -> Result<(PhaseState, Vec<f64>)> {
    let d = state.dims();
    let m = state.masses();
    let half: Vec<f64> = state
        .momenta()
        .iter()
        .zip(f0)
        .map(|(p, f)| p + 0.5 * dt * f)
        .collect();
    let x: Vec<f64> = state
        .positions()
        .iter()
        .zip(&half)
        .enumerate()
        .map(|(j, (x, p))| x + dt * p / m[j / d])
        .collect();
    let drifted = state.with_coordinates(x, half);
    let f1 = sys.force(&drifted)?;
    let p: Vec<f64> = drifted
        .momenta()
        .iter()
        .zip(&f1)
        .map(|(p, f)| p + 0.5 * dt * f)
        .collect();
    Ok((drifted.with_momenta(p), f1))
}

/// `(x, p) + dt * u(x, p, dt)`.
pub fn hfm_step(field: &dyn FlowField, state: &PhaseState, dt: f64) -> Result<PhaseState> {
    if !(dt >= 0.0) || dt > field.dt_max() {
        return Err(Error::TimestepOutOfRange {
            dt,
            dt_max: field.dt_max(),
        });
    }
    if state.count() != field.count() || state.dims() != field.dims() {
        return Err(Error::Shape {
            system: "flow field",
            expected: format!("{} particles in {}D", field.count(), field.dims()),
            got: format!("{} particles in {}D", state.count(), state.dims()),
        });
    }
    let (v, f) = field.mean_field(state.positions(), state.momenta(), dt)?;
    let x = state
        .positions()
        .iter()
        .zip(&v)
        .map(|(x, v)| x + dt * v)
        .collect();
    let p = state
        .momenta()
        .iter()
        .zip(&f)
        .map(|(p, f)| p + dt * f)
        .collect();
    Ok(state.with_coordinates(x, p))
}

/// A one-step propagator.
pub trait Stepper {
    fn step(&mut self, state: &PhaseState, dt: f64) -> Result<PhaseState>;

    /// Largest supported timestep.
    fn dt_max(&self) -> f64 {
        f64::INFINITY
    }
}

/// Velocity Verlet that reuses the force from the previous step when the
/// positions are unchanged, so results match [`vv_step`] bit for bit.
#[derive(Clone, Debug)]
pub struct VelocityVerlet {
    pub system: SystemParams,
    cache: Option<(Vec<f64>, Vec<f64>)>,
}

impl VelocityVerlet {
    pub fn new(system: SystemParams) -> Self {
        Self {
            system,
            cache: None,
        }
    }
}

impl Stepper for VelocityVerlet {
    fn step(&mut self, state: &PhaseState, dt: f64) -> Result<PhaseState> {
        let f0 = match self.cache.take() {
            Some((x, f)) if x == state.positions() => f,
            _ => self.system.force(state)?,
        };
        let (next, f1) = vv_step_with_force(&self.system, state, &f0, dt)?;
        self.cache = Some((next.positions().to_vec(), f1));
        Ok(next)
    }
}

pub struct HfmStepper<'a> {
    pub field: &'a dyn FlowField,
}

impl Stepper for HfmStepper<'_> {
    fn step(&mut self, state: &PhaseState, dt: f64) -> Result<PhaseState> {
        hfm_step(self.field, state, dt)
    }

    fn dt_max(&self) -> f64 {
        self.field.dt_max()
    }
}

/// Conserved-quantity diagnostics of one state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub total_energy: f64,
    pub kinetic_energy: f64,
    pub angular_momentum: [f64; 3],
    pub momentum: Vec<f64>,
}

impl Diagnostics {
    pub fn of(state: &PhaseState, potential: &dyn Potential) -> Result<Self> {
        Ok(Self::with_potential(
            state,
            potential.potential_energy(state)?,
        ))
    }

    fn with_potential(state: &PhaseState, e_pot: f64) -> Self {
        let kinetic_energy = state.kinetic_energy();
        Self {
            total_energy: kinetic_energy + e_pot,
            kinetic_energy,
            angular_momentum: state.angular_momentum(),
            momentum: state.total_momentum(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RolloutStatus {
    Completed,
    /// A coordinate left the sanity box after `step` steps.
    LeftBox {
        step: usize,
    },
    NonFinite {
        step: usize,
    },
}

impl RolloutStatus {
    pub fn label(&self) -> &'static str {
        match self {
            RolloutStatus::Completed => "completed",
            RolloutStatus::LeftBox { .. } => "left_box",
            RolloutStatus::NonFinite { .. } => "non_finite",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<PhaseState>,
    pub times: Vec<f64>,
    pub dt: f64,
    pub diagnostics: Vec<Diagnostics>,
    /// One entry per step when the coupled filter is active, else empty.
    pub filter_diagnostics: Vec<FilterDiagnostics>,
    pub status: RolloutStatus,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn last(&self) -> &PhaseState {
        self.states
            .last()
            .expect("trajectories hold at least the initial state")
    }

    pub fn start_time(&self) -> f64 {
        self.times[0]
    }

    /// Diagnostics recomputed from the stored states.
    pub fn recompute_diagnostics(&self, potential: &dyn Potential) -> Result<Vec<Diagnostics>> {
        self.states
            .iter()
            .map(|s| Diagnostics::of(s, potential))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutOptions {
    #[serde(default)]
    pub t0: f64,
    /// Early stop once any |coordinate| reaches this bound.
    #[serde(default = "default_bound")]
    pub sanity_bound: f64,
}

fn default_bound() -> f64 {
    1e3
}

impl Default for RolloutOptions {
    fn default() -> Self {
        Self {
            t0: 0.0,
            sanity_bound: 1e3,
        }
    }
}

/// Runs `n_steps` steps. Each step is the stepper (wrapped in a random
/// rotation when requested) followed by the remaining filters in list order.
/// Leaving the sanity box or producing non-finite values stops the rollout
/// with a status; the offending state is not recorded.
pub fn rollout(
    stepper: &mut dyn Stepper,
    state0: &PhaseState,
    dt: f64,
    n_steps: usize,
    filter_list: &[FilterSpec],
    potential: &dyn Potential,
    options: &RolloutOptions,
    rng: &mut StreamRng,
) -> Result<Trajectory> {
    if !(dt >= 0.0) || dt > stepper.dt_max() {
        return Err(Error::TimestepOutOfRange {
            dt,
            dt_max: stepper.dt_max(),
        });
    }
    for f in filter_list {
        f.validate(state0.dims())?;
    }
    let rotate = filter_list.contains(&FilterSpec::RandomRotation);
    let coupled = filter_list.contains(&FilterSpec::CoupledConservation);

    let mut e_pot = potential.potential_energy(state0)?;
    let mut traj = Trajectory {
        states: vec![state0.clone()],
        times: vec![options.t0],
        dt,
        diagnostics: vec![Diagnostics::with_potential(state0, e_pot)],
        filter_diagnostics: Vec::new(),
        status: RolloutStatus::Completed,
    };
    for step in 0..n_steps {
        let prev = traj.last();
        let mut next = if rotate {
            filters::random_rotation_wrap(prev, rng, |s| stepper.step(s, dt))?
        } else {
            stepper.step(prev, dt)?
        };
        let mut next_pot = None;
        let mut diag = None;
        for f in filter_list {
            match *f {
                FilterSpec::RandomRotation => {}
                FilterSpec::RemoveDrift => {
                    next = filters::remove_drift_filter(prev, &next, dt)?;
                    next_pot = None;
                }
                FilterSpec::CoupledConservation => {
                    if !next.is_finite() {
                        break;
                    }
                    let after = potential.potential_energy(&next)?;
                    let targets = ConservationTargets::from_step(prev, &next, e_pot, after);
                    let (filtered, d) = filters::coupled_conservation_filter(&next, &targets);
                    next = filtered;
                    next_pot = Some(after);
                    diag = Some(d);
                }
                FilterSpec::Langevin {
                    temperature,
                    gamma,
                    k_b,
                } => {
                    next = filters::langevin_thermostat(&next, dt, temperature, gamma, k_b, rng)?;
                }
            }
        }
        if !next.is_finite() {
            traj.status = RolloutStatus::NonFinite { step: step + 1 };
            break;
        }
        if next
            .positions()
            .iter()
            .any(|x| x.abs() >= options.sanity_bound)
        {
            traj.status = RolloutStatus::LeftBox { step: step + 1 };
            break;
        }
        let pot = match next_pot {
            Some(v) => v,
            None => potential.potential_energy(&next)?,
        };
        if coupled {
            traj.filter_diagnostics
                .push(diag.expect("coupled filter ran"));
        }
        e_pot = pot;
        traj.diagnostics
            .push(Diagnostics::with_potential(&next, pot));
        traj.times.push(options.t0 + (step + 1) as f64 * dt);
        traj.states.push(next);
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::OscillatorMeanField;
    use crate::rng;
    use std::f64::consts::PI;

    fn osc() -> SystemParams {
        SystemParams::HarmonicOscillator { omega: 1.0 }
    }

    fn unit(x: f64, p: f64) -> PhaseState {
        PhaseState::new(vec![x], vec![p], vec![1.0], 1).unwrap()
    }

    #[test]
    fn vv_returns_after_one_period() {
        let mut s = unit(1.0, 0.0);
        let n = 628;
        let dt = 2.0 * PI / n as f64;
        for _ in 0..n {
            s = vv_step(&osc(), &s, dt).unwrap();
        }
        assert!((s.positions()[0] - 1.0).abs() < 1e-3 && s.momenta()[0].abs() < 1e-3);
        assert_eq!(vv_step(&osc(), &s, 0.0).unwrap(), s);
    }

    #[test]
    fn vv_is_time_reversible() {
        let sys = SystemParams::Gravity {
            g: 1.0,
            softening: 0.1,
        };
        let s = PhaseState::new(
            vec![0.0, 0.0, 0.0, 1.0, 0.1, 0.0, -0.3, 0.8, 0.2],
            vec![0.1, 0.2, 0.0, -0.2, 0.0, 0.1, 0.1, -0.2, -0.1],
            vec![1.0, 1.5, 0.7],
            3,
        )
        .unwrap();
        let flip = |s: &PhaseState| s.with_momenta(s.momenta().iter().map(|p| -p).collect());
        let back = flip(&vv_step(&sys, &flip(&vv_step(&sys, &s, 0.05).unwrap()), 0.05).unwrap());
        for (a, b) in back
            .positions()
            .iter()
            .zip(s.positions())
            .chain(back.momenta().iter().zip(s.momenta()))
        {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn hfm_step_with_analytic_field() {
        let field = OscillatorMeanField { omega: 1.0 };
        let s = unit(1.0, 0.0);
        let out = hfm_step(&field, &s, PI / 2.0).unwrap();
        assert!(out.positions()[0].abs() < 1e-12 && (out.momenta()[0] + 1.0).abs() < 1e-12);
        assert_eq!(hfm_step(&field, &s, 0.0).unwrap(), s);
        let half = hfm_step(&field, &hfm_step(&field, &s, 0.6).unwrap(), 0.6).unwrap();
        let full = hfm_step(&field, &s, 1.2).unwrap();
        assert!((half.positions()[0] - full.positions()[0]).abs() < 1e-10);
        assert!((half.momenta()[0] - full.momenta()[0]).abs() < 1e-10);
    }

    #[test]
    fn rollout_matches_sequential_steps() {
        let s0 = unit(0.3, 1.1);
        let mut vv = VelocityVerlet::new(osc());
        let mut r = rng::stream(0, rng::purpose::SIMULATE, 0);
        let traj = rollout(
            &mut vv,
            &s0,
            0.1,
            50,
            &[],
            &osc(),
            &RolloutOptions::default(),
            &mut r,
        )
        .unwrap();
        let mut s = s0.clone();
        for k in 1..=50 {
            s = vv_step(&osc(), &s, 0.1).unwrap();
            assert_eq!(traj.states[k], s);
        }
        assert_eq!(traj.status, RolloutStatus::Completed);
        assert_eq!(
            traj.recompute_diagnostics(&osc()).unwrap(),
            traj.diagnostics
        );
        let empty = rollout(
            &mut vv,
            &s0,
            0.1,
            0,
            &[],
            &osc(),
            &RolloutOptions::default(),
            &mut r,
        )
        .unwrap();
        assert_eq!(empty.len(), 1);
    }

    #[test]
    fn rollout_stops_outside_the_box() {
        let s0 = unit(0.0, 10.0);
        let mut vv = VelocityVerlet::new(SystemParams::HarmonicOscillator { omega: 1e-6 });
        let opts = RolloutOptions {
            t0: 0.0,
            sanity_bound: 4.95,
        };
        let mut r = rng::stream(0, rng::purpose::SIMULATE, 0);
        let traj = rollout(&mut vv, &s0, 0.1, 100, &[], &osc(), &opts, &mut r).unwrap();
        assert_eq!(traj.status, RolloutStatus::LeftBox { step: 5 });
        assert_eq!(traj.len(), 5);
    }

    #[test]
    fn hfm_rejects_large_steps() {
        let field = OscillatorMeanField { omega: 1.0 };
        struct Capped(OscillatorMeanField);
        impl FlowField for Capped {
            fn count(&self) -> usize {
                1
            }
            fn dims(&self) -> usize {
                1
            }
            fn dt_max(&self) -> f64 {
                1.0
            }
            fn mean_field(&self, x: &[f64], p: &[f64], dt: f64) -> Result<(Vec<f64>, Vec<f64>)> {
                self.0.mean_field(x, p, dt)
            }
            fn mean_field_jvp(
                &self,
                x: &[f64],
                p: &[f64],
                dt: f64,
                t: &crate::net::InputTangent,
            ) -> Result<crate::net::FieldJet> {
                self.0.mean_field_jvp(x, p, dt, t)
            }
        }
        let capped = Capped(field);
        assert!(matches!(
            hfm_step(&capped, &unit(1.0, 0.0), 1.5),
            Err(Error::TimestepOutOfRange { .. })
        ));
    }

    #[test]
    fn energy_error_is_bounded_and_second_order() {
        let spread = |dt: f64| {
            let mut vv = VelocityVerlet::new(osc());
            let mut r = rng::stream(0, 0, 0);
            let t = rollout(
                &mut vv,
                &unit(1.0, 0.0),
                dt,
                10_000,
                &[],
                &osc(),
                &RolloutOptions::default(),
                &mut r,
            )
            .unwrap();
            let e: Vec<f64> = t.diagnostics.iter().map(|d| d.total_energy - 0.5).collect();
            let first = e[..5000].iter().fold(0.0_f64, |a, v| a.max(v.abs()));
            let second = e[5000..].iter().fold(0.0_f64, |a, v| a.max(v.abs()));
            (first.max(second), first, second)
        };
        let (e05, _, _) = spread(0.05);
        let (e10, first, second) = spread(0.1);
        let c = e05 / 0.05f64.powi(2);
        assert!(e10 <= 1.1 * c * 0.01, "{e10} vs {}", c * 0.01);
        assert!(second <= 1.05 * first);
    }
}
