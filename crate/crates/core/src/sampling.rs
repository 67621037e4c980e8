//! Trajectory-free training data.
//!
//! Positions are drawn uniformly from a box and rejected above the target
//! energy; momenta either close the energy budget exactly or come from a
//! Maxwell-Boltzmann distribution. Timesteps are drawn per training example.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Beta, Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrate::vv_step;
use crate::rng;
use crate::state::{invert_inertia, PhaseState};
use crate::systems::SystemParams;

/// One training tuple `(x, p, v, f)` with its timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub state: PhaseState,
    pub velocity: Vec<f64>,
    pub force: Vec<f64>,
    pub timestep: f64,
}

impl Sample {
    /// Builds a sample, deriving the velocity as `p / m`.
    pub fn new(state: PhaseState, force: Vec<f64>, timestep: f64) -> Result<Self> {
        if force.len() != state.len() {
            return Err(Error::InvalidState(format!(
                "force has {} components, state has {}",
                force.len(),
                state.len()
            )));
        }
        if !(timestep >= 0.0) {
            return Err(Error::InvalidState(format!("negative timestep {timestep}")));
        }
        let velocity = state.velocities();
        Ok(Self {
            state,
            velocity,
            force,
            timestep,
        })
    }

    pub fn with_timestep(mut self, timestep: f64) -> Self {
        self.timestep = timestep;
        self
    }

    /// Replaces the momenta, keeping the velocity consistent.
    pub fn with_state(mut self, state: PhaseState) -> Self {
        self.velocity = state.velocities();
        self.state = state;
        self
    }
}

/// Per-dimension bounds applied to every particle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl PositionBox {
    pub fn cube(dims: usize, half_width: f64) -> Self {
        Self {
            lower: vec![-half_width; dims],
            upper: vec![half_width; dims],
        }
    }

    /// Default proposal box for a system.
    pub fn default_for(sys: &SystemParams, dims: usize) -> Self {
        match sys {
            SystemParams::HarmonicOscillator { .. } => Self::cube(1, 2.0),
            SystemParams::Barbanis { .. } => Self::cube(2, 2.0),
            // covers the E = -5 shell of the default (m = k = l0 = 1) pendulum
            SystemParams::SpringPendulum { .. } => Self {
                lower: vec![-12.0, -22.0],
                upper: vec![12.0, 0.0],
            },
            SystemParams::Gravity { .. } => Self::cube(dims, 1.0),
        }
    }

    pub fn dims(&self) -> usize {
        self.lower.len()
    }

    fn validate(&self) -> Result<()> {
        if self.lower.len() != self.upper.len() || self.lower.is_empty() {
            return Err(Error::Config(
                "position box bounds must have equal, nonzero length".into(),
            ));
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| !(u > l)) {
            return Err(Error::Config("position box has zero volume".into()));
        }
        Ok(())
    }
}

/// Configuration of the fixed-energy rejection sampler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedEnergy {
    pub e_tot: f64,
    pub bounds: PositionBox,
    pub count: usize,
    #[serde(default = "default_max_tries")]
    pub max_tries: usize,
    /// Remove the center-of-mass drift from the momentum direction before
    /// closing the energy budget (multi-particle systems only).
    #[serde(default)]
    pub zero_total_momentum: bool,
}

fn default_max_tries() -> usize {
    1_000_000
}

/// Momenta sampling at a fluctuating temperature, plus edge-case projections.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentumSamplerCfg {
    pub mean_temperature: f64,
    #[serde(default)]
    pub temperature_std: f64,
    #[serde(default = "one")]
    pub k_b: f64,
    #[serde(default)]
    pub q_zero_angular: f64,
    #[serde(default)]
    pub q_zero_momentum: f64,
}

fn one() -> f64 {
    1.0
}

impl MomentumSamplerCfg {
    pub fn validate(&self) -> Result<()> {
        let prob = |q: f64| (0.0..=1.0).contains(&q);
        if !(self.k_b > 0.0)
            || self.temperature_std < 0.0
            || !prob(self.q_zero_angular)
            || !prob(self.q_zero_momentum)
        {
            return Err(Error::Config(format!("invalid momentum sampler {self:?}")));
        }
        Ok(())
    }
}

/// Uniform proposals inside `bounds`, accepted when `V(x) <= e_tot`.
/// Returns the accepted positions and the number of proposals used.
fn propose_positions<R: Rng + ?Sized>(
    sys: &SystemParams,
    cfg: &FixedEnergy,
    masses: &[f64],
    rng: &mut R,
) -> Result<(PhaseState, usize)> {
    let dims = cfg.bounds.dims();
    let mut x = vec![0.0; cfg.count * dims];
    for tries in 1..=cfg.max_tries {
        for (j, xj) in x.iter_mut().enumerate() {
            let k = j % dims;
            *xj = rng.gen_range(cfg.bounds.lower[k]..cfg.bounds.upper[k]);
        }
        let state = PhaseState::at_rest(x.clone(), masses.to_vec(), dims)?;
        if sys.potential_energy(&state)? <= cfg.e_tot {
            return Ok((state, tries));
        }
    }
    Err(Error::RejectionExhausted {
        tries: cfg.max_tries,
        acceptance: 0.0,
    })
}

/// Draws one sample on the `e_tot` energy shell: uniform positions with
/// `V(x) <= e_tot`, a uniformly random momentum direction, and the momentum
/// magnitude chosen so the total energy equals `e_tot`.
pub fn sample_fixed_energy<R: Rng + ?Sized>(
    sys: &SystemParams,
    cfg: &FixedEnergy,
    rng: &mut R,
) -> Result<Sample> {
    sample_fixed_energy_counted(sys, cfg, rng).map(|(s, _)| s)
}

fn sample_fixed_energy_counted<R: Rng + ?Sized>(
    sys: &SystemParams,
    cfg: &FixedEnergy,
    rng: &mut R,
) -> Result<(Sample, usize)> {
    cfg.bounds.validate()?;
    let dims = cfg.bounds.dims();
    sys.check_shape(cfg.count, dims)?;
    let masses = sys.default_masses(cfg.count);
    let (state, tries) = propose_positions(sys, cfg, &masses, rng)?;
    let kinetic = cfg.e_tot - sys.potential_energy(&state)?;

    let mut dir: Vec<f64> = (0..state.len())
        .map(|_| rng.sample(StandardNormal))
        .collect();
    if cfg.zero_total_momentum && cfg.count >= 2 {
        let drift = state.with_momenta(dir.clone()).total_momentum();
        let total_mass = state.total_mass();
        for (j, u) in dir.iter_mut().enumerate() {
            *u -= masses[j / dims] * drift[j % dims] / total_mass;
        }
    }
    let unit_kinetic = state.with_momenta(dir.clone()).kinetic_energy();
    let scale = if kinetic > 0.0 && unit_kinetic > 0.0 {
        (kinetic / unit_kinetic).sqrt()
    } else {
        0.0
    };
    let state = state.with_momenta(dir.iter().map(|u| u * scale).collect());
    let force = sys.force(&state)?;
    Ok((Sample::new(state, force, 0.0)?, tries))
}

/// Replaces momenta by a Maxwell-Boltzmann draw at one temperature
/// `T ~ N(mean, std^2)`, clipped at zero.
pub fn sample_maxwell_boltzmann<R: Rng + ?Sized>(
    state: &PhaseState,
    cfg: &MomentumSamplerCfg,
    rng: &mut R,
) -> PhaseState {
    let t: f64 = cfg.mean_temperature + cfg.temperature_std * rng.sample::<f64, _>(StandardNormal);
    let t = t.max(0.0);
    let d = state.dims();
    let momenta = (0..state.len())
        .map(|j| {
            let z: f64 = rng.sample(StandardNormal);
            z * (state.masses()[j / d] * cfg.k_b * t).sqrt()
        })
        .collect();
    state.with_momenta(momenta)
}

/// Kinetic-energy target of [`remove_drift_and_rescale`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RescaleTarget {
    /// Keep the kinetic energy the momenta had before drift removal.
    PreserveKinetic,
    /// Match `k_B T` per degree of freedom, with `d (N - 1)` degrees of freedom.
    Temperature { temperature: f64, k_b: f64 },
}

/// Subtracts `m_i * v_com` from every momentum and rescales the result to
/// the requested kinetic energy.
pub fn remove_drift_and_rescale(state: &PhaseState, target: RescaleTarget) -> Result<PhaseState> {
    let n = state.count();
    if n < 2 {
        return Err(Error::Unsupported(
            "drift removal of a single particle".into(),
        ));
    }
    let d = state.dims();
    let k_before = state.kinetic_energy();
    let drifted = remove_drift(state);
    let k_cur = drifted.kinetic_energy();
    let k_tgt = match target {
        RescaleTarget::PreserveKinetic => k_before,
        RescaleTarget::Temperature { temperature, k_b } => {
            0.5 * k_b * temperature * (d * (n - 1)) as f64
        }
    };
    if k_cur == 0.0 {
        if k_tgt == 0.0 {
            return Ok(drifted);
        }
        return Err(Error::ZeroMomentum);
    }
    let s = (k_tgt / k_cur).sqrt();
    let momenta = drifted.momenta().iter().map(|p| p * s).collect();
    Ok(drifted.with_momenta(momenta))
}

pub(crate) fn remove_drift(state: &PhaseState) -> PhaseState {
    let d = state.dims();
    let total_mass = state.total_mass();
    let v_com: Vec<f64> = state
        .total_momentum()
        .iter()
        .map(|p| p / total_mass)
        .collect();
    let momenta = state
        .momenta()
        .iter()
        .enumerate()
        .map(|(j, p)| p - state.masses()[j / d] * v_com[j % d])
        .collect();
    state.with_momenta(momenta)
}

/// Removes the rigid-rotation component `m_i (omega x r_i)` with `I omega = L`.
pub fn project_zero_angular_momentum(state: &PhaseState) -> Result<PhaseState> {
    if state.dims() != 3 {
        return Err(Error::Unsupported(format!(
            "angular momentum projection in {}D",
            state.dims()
        )));
    }
    let rel = state.relative_positions3();
    let inertia = crate::state::inertia_tensor(&rel, state.masses());
    let inv = invert_inertia(&inertia, 1e-10)?;
    let l = Vector3::from(state.angular_momentum());
    let omega = inv * l;
    let mut momenta = state.momenta().to_vec();
    for (i, (r, m)) in rel.iter().zip(state.masses()).enumerate() {
        let rigid = omega.cross(r) * *m;
        for k in 0..3 {
            momenta[3 * i + k] -= rigid[k];
        }
    }
    Ok(state.with_momenta(momenta))
}

/// Fresh training momenta: Maxwell-Boltzmann draw, drift removal with the
/// kinetic energy preserved, then the zero-L and zero-p edge cases with their
/// configured probabilities. Projections that do not apply to the system
/// (single particle, `d < 3`, collinear) are skipped.
pub fn resample_momenta<R: Rng + ?Sized>(
    state: &PhaseState,
    cfg: &MomentumSamplerCfg,
    rng: &mut R,
) -> PhaseState {
    let mut s = sample_maxwell_boltzmann(state, cfg, rng);
    let three_d = s.dims() == 3 && s.count() >= 2;
    let zero_l = rng.gen::<f64>() < cfg.q_zero_angular;
    let zero_p = rng.gen::<f64>() < cfg.q_zero_momentum;
    if three_d {
        if let Ok(r) = remove_drift_and_rescale(&s, RescaleTarget::PreserveKinetic) {
            s = r;
        }
        if zero_l {
            if let Ok(r) = project_zero_angular_momentum(&s) {
                s = r;
            }
        }
        if zero_p {
            s = s.with_momenta(vec![0.0; s.len()]);
        }
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimestepKind {
    Uniform,
    LogitNormalDiff {
        mu: f64,
        sigma: f64,
    },
    Mixture {
        beta_a: f64,
        beta_b: f64,
        uniform_weight: f64,
    },
}

impl TimestepKind {
    pub fn logit_normal_default() -> Self {
        TimestepKind::LogitNormalDiff {
            mu: -0.4,
            sigma: 1.0,
        }
    }

    pub fn mixture_default() -> Self {
        TimestepKind::Mixture {
            beta_a: 1.0,
            beta_b: 2.0,
            uniform_weight: 0.02,
        }
    }
}

/// Distribution of training timesteps `dt = tau * dt_max`, with a point mass
/// of weight `q_zero` at zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimestepDist {
    pub kind: TimestepKind,
    pub dt_max: f64,
    #[serde(default)]
    pub q_zero: f64,
}

impl TimestepDist {
    pub fn validate(&self) -> Result<()> {
        let prob = |q: f64| (0.0..=1.0).contains(&q);
        let kind_ok = match self.kind {
            TimestepKind::Uniform => true,
            TimestepKind::LogitNormalDiff { sigma, .. } => sigma > 0.0,
            TimestepKind::Mixture {
                beta_a,
                beta_b,
                uniform_weight,
            } => beta_a > 0.0 && beta_b > 0.0 && prob(uniform_weight),
        };
        if !(self.dt_max > 0.0) || !prob(self.q_zero) || !kind_ok {
            return Err(Error::Config(format!(
                "invalid timestep distribution {self:?}"
            )));
        }
        Ok(())
    }

    /// Draws `tau` in `[0, 1]` from the base distribution, ignoring `q_zero`.
    pub fn sample_tau<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.kind {
            TimestepKind::Uniform => rng.gen::<f64>(),
            TimestepKind::LogitNormalDiff { mu, sigma } => {
                let normal = Normal::new(mu, sigma).expect("sigma validated");
                let sigmoid = |z: f64| 1.0 / (1.0 + (-z).exp());
                (sigmoid(normal.sample(rng)) - sigmoid(normal.sample(rng))).abs()
            }
            TimestepKind::Mixture {
                beta_a,
                beta_b,
                uniform_weight,
            } => {
                if rng.gen::<f64>() < uniform_weight {
                    rng.gen::<f64>()
                } else {
                    Beta::new(beta_a, beta_b)
                        .expect("shape validated")
                        .sample(rng)
                }
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if rng.gen::<f64>() < self.q_zero {
            return 0.0;
        }
        (self.sample_tau(rng) * self.dt_max).min(self.dt_max)
    }
}

/// How momenta are assigned when generating a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MomentumMode {
    /// Close the energy budget exactly: `H(x, p) = e_tot`.
    FixedEnergy,
    /// Maxwell-Boltzmann momenta at a fluctuating temperature.
    MaxwellBoltzmann(MomentumSamplerCfg),
}

/// Advances each drawn state with fine Velocity Verlet for a uniformly random
/// whole number of steps in `[0, t_max / dt]` before it is stored, so the data
/// covers configurations reachable by the dynamics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evolve {
    pub dt: f64,
    pub t_max: f64,
}

impl Evolve {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !(self.t_max >= 0.0) || !self.t_max.is_finite() {
            return Err(Error::Config(format!("invalid evolve settings {self:?}")));
        }
        Ok(())
    }

    fn apply<R: Rng + ?Sized>(
        &self,
        sys: &SystemParams,
        state: &PhaseState,
        rng: &mut R,
    ) -> Result<PhaseState> {
        let max_steps = (self.t_max / self.dt).round() as usize;
        let n = rng.gen_range(0..=max_steps);
        let mut s = state.clone();
        for _ in 0..n {
            s = vv_step(sys, &s, self.dt)?;
        }
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub samples: usize,
    pub positions: FixedEnergy,
    pub momenta: MomentumMode,
    #[serde(default)]
    pub evolve: Option<Evolve>,
}

/// In-memory dataset of trajectory-free samples for one system.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub system: SystemParams,
    pub count: usize,
    pub dims: usize,
    pub masses: Vec<f64>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Largest `|H(x, p) - e_tot|` over the dataset.
    pub fn max_energy_error(&self, e_tot: f64) -> Result<f64> {
        self.samples.iter().try_fold(0.0_f64, |acc, s| {
            Ok(acc.max((self.system.total_energy(&s.state)? - e_tot).abs()))
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenReport {
    pub proposals: usize,
    pub acceptance_rate: f64,
}

const SHARD: usize = 256;

/// Generates `cfg.samples` samples. Work is split into fixed shards with one
/// random stream each, so the output depends only on `seed`, never on the
/// number of workers.
pub fn generate_dataset(
    sys: &SystemParams,
    cfg: &GenConfig,
    seed: u64,
    workers: usize,
) -> Result<(Dataset, GenReport)> {
    sys.validate()?;
    cfg.positions.bounds.validate()?;
    let dims = cfg.positions.bounds.dims();
    sys.check_shape(cfg.positions.count, dims)?;
    if let MomentumMode::MaxwellBoltzmann(m) = &cfg.momenta {
        m.validate()?;
    }
    if let Some(ev) = &cfg.evolve {
        ev.validate()?;
    }
    let shards = cfg.samples.div_ceil(SHARD);
    let run_shard = |shard: usize| -> Result<(Vec<Sample>, usize)> {
        let mut rng = rng::stream(seed, rng::purpose::GEN, shard as u64);
        let n = SHARD.min(cfg.samples - shard * SHARD);
        let mut out = Vec::with_capacity(n);
        let mut proposals = 0;
        for _ in 0..n {
            let (sample, tries) = sample_fixed_energy_counted(sys, &cfg.positions, &mut rng)?;
            proposals += tries;
            let sample = match &cfg.momenta {
                MomentumMode::FixedEnergy => sample,
                MomentumMode::MaxwellBoltzmann(m) => {
                    let state = resample_momenta(&sample.state, m, &mut rng);
                    sample.with_state(state)
                }
            };
            let sample = match &cfg.evolve {
                None => sample,
                Some(ev) => {
                    let state = ev.apply(sys, &sample.state, &mut rng)?;
                    let force = sys.force(&state)?;
                    Sample::new(state, force, 0.0)?
                }
            };
            out.push(sample);
        }
        Ok((out, proposals))
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let parts: Vec<Result<(Vec<Sample>, usize)>> =
        pool.install(|| (0..shards).into_par_iter().map(run_shard).collect());
    let mut samples = Vec::with_capacity(cfg.samples);
    let mut proposals = 0;
    for part in parts {
        let (s, p) = part?;
        samples.extend(s);
        proposals += p;
    }
    let acceptance_rate = if proposals > 0 {
        samples.len() as f64 / proposals as f64
    } else {
        0.0
    };
    Ok((
        Dataset {
            system: *sys,
            count: cfg.positions.count,
            dims,
            masses: sys.default_masses(cfg.positions.count),
            samples,
        },
        GenReport {
            proposals,
            acceptance_rate,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    fn shell(sys: &SystemParams, e_tot: f64) -> FixedEnergy {
        let dims = sys.fixed_dims().unwrap();
        FixedEnergy {
            e_tot,
            bounds: PositionBox::default_for(sys, dims),
            count: 1,
            max_tries: 100_000,
            zero_total_momentum: false,
        }
    }

    #[test]
    fn barbanis_samples_sit_on_the_energy_shell() {
        let sys = SystemParams::barbanis_default();
        let cfg = shell(&sys, 1.5);
        let mut r = rng();
        for _ in 0..500 {
            let s = sample_fixed_energy(&sys, &cfg, &mut r).unwrap();
            assert!((sys.total_energy(&s.state).unwrap() - 1.5).abs() < 1e-12);
            assert_eq!(s.velocity, s.state.velocities());
            assert_eq!(s.force, sys.force(&s.state).unwrap());
        }
    }

    #[test]
    fn spring_pendulum_positions_below_energy() {
        let sys = SystemParams::spring_pendulum_default();
        let cfg = shell(&sys, -5.0);
        let mut r = rng();
        for _ in 0..300 {
            let s = sample_fixed_energy(&sys, &cfg, &mut r).unwrap();
            assert!(sys.potential_energy(&s.state).unwrap() <= -5.0);
            assert!((sys.total_energy(&s.state).unwrap() + 5.0).abs() < 1e-10);
        }
    }

    #[test]
    fn oscillator_turning_point_bound() {
        let sys = SystemParams::HarmonicOscillator { omega: 1.0 };
        let cfg = shell(&sys, 0.5);
        let mut r = rng();
        for _ in 0..1000 {
            let s = sample_fixed_energy(&sys, &cfg, &mut r).unwrap();
            assert!(s.state.positions()[0].abs() <= 1.0);
        }
    }

    #[test]
    fn unreachable_energy_exhausts_budget() {
        let sys = SystemParams::HarmonicOscillator { omega: 1.0 };
        let mut cfg = shell(&sys, -1.0);
        cfg.max_tries = 100;
        assert!(matches!(
            sample_fixed_energy(&sys, &cfg, &mut rng()),
            Err(Error::RejectionExhausted { tries: 100, .. })
        ));
    }

    #[test]
    fn maxwell_boltzmann_zero_temperature_is_at_rest() {
        let s = PhaseState::at_rest(vec![0.0; 6], vec![1.0, 2.0], 3).unwrap();
        let cfg = MomentumSamplerCfg {
            mean_temperature: 0.0,
            temperature_std: 0.0,
            k_b: 1.0,
            q_zero_angular: 0.0,
            q_zero_momentum: 0.0,
        };
        assert!(sample_maxwell_boltzmann(&s, &cfg, &mut rng())
            .momenta()
            .iter()
            .all(|p| *p == 0.0));
    }

    #[test]
    fn maxwell_boltzmann_variance() {
        let s = PhaseState::at_rest(vec![0.0], vec![1.0], 1).unwrap();
        let cfg = MomentumSamplerCfg {
            mean_temperature: 2.0,
            temperature_std: 0.0,
            k_b: 1.0,
            q_zero_angular: 0.0,
            q_zero_momentum: 0.0,
        };
        let mut r = rng();
        let n = 100_000;
        let var = (0..n)
            .map(|_| sample_maxwell_boltzmann(&s, &cfg, &mut r).momenta()[0].powi(2))
            .sum::<f64>()
            / n as f64;
        assert!((var - 2.0).abs() < 0.06, "variance {var}");
    }

    #[test]
    fn maxwell_boltzmann_clips_negative_temperatures() {
        let s = PhaseState::at_rest(vec![0.0; 3], vec![1.0], 3).unwrap();
        let cfg = MomentumSamplerCfg {
            mean_temperature: 1.0,
            temperature_std: 10.0,
            k_b: 1.0,
            q_zero_angular: 0.0,
            q_zero_momentum: 0.0,
        };
        let mut r = rng();
        for _ in 0..1000 {
            assert!(sample_maxwell_boltzmann(&s, &cfg, &mut r).is_finite());
        }
    }

    #[test]
    fn drift_removal_examples() {
        let s = PhaseState::new(
            vec![0.0; 6],
            vec![2.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            vec![1.0, 1.0],
            3,
        )
        .unwrap();
        let r = remove_drift_and_rescale(&s, RescaleTarget::PreserveKinetic).unwrap();
        let a = 2.0_f64.sqrt();
        assert!((r.momenta()[0] - a).abs() < 1e-15 && (r.momenta()[3] + a).abs() < 1e-15);
        assert!((r.kinetic_energy() - 2.0).abs() < 1e-14);

        let comoving = s.with_momenta(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!(matches!(
            remove_drift_and_rescale(&comoving, RescaleTarget::PreserveKinetic),
            Err(Error::ZeroMomentum)
        ));

        let free = s.with_momenta(vec![1.0, 0.5, 0.0, -1.0, -0.5, 0.0]);
        let r = remove_drift_and_rescale(&free, RescaleTarget::PreserveKinetic).unwrap();
        assert_eq!(r.momenta(), free.momenta());
    }

    #[test]
    fn drift_removal_to_temperature() {
        let s = PhaseState::new(
            vec![0.0; 9],
            vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0, 0.3, 0.2, 0.1],
            vec![1.0, 2.0, 3.0],
            3,
        )
        .unwrap();
        let r = remove_drift_and_rescale(
            &s,
            RescaleTarget::Temperature {
                temperature: 1.5,
                k_b: 1.0,
            },
        )
        .unwrap();
        assert!(r.total_momentum().iter().all(|p| p.abs() < 1e-12));
        assert!((r.kinetic_energy() - 0.5 * 1.5 * 6.0).abs() < 1e-12);
    }

    #[test]
    fn angular_projection_examples() {
        // rigid triangle spinning about z: p = m (omega x r)
        let x = vec![1.0, 0.0, 0.3, -0.5, 0.8, 0.3, -0.5, -0.8, 0.3];
        let masses = vec![1.0, 1.0, 1.0];
        let s = PhaseState::at_rest(x.clone(), masses.clone(), 3).unwrap();
        let rel = s.relative_positions3();
        let omega = Vector3::new(0.0, 0.0, 1.0);
        let p: Vec<f64> = rel
            .iter()
            .flat_map(|r| {
                let v = omega.cross(r);
                [v.x, v.y, v.z]
            })
            .collect();
        let spinning = s.with_momenta(p);
        let out = project_zero_angular_momentum(&spinning).unwrap();
        assert!(out.momenta().iter().all(|p| p.abs() < 1e-14));

        let still = project_zero_angular_momentum(&out).unwrap();
        assert!(still
            .momenta()
            .iter()
            .zip(out.momenta())
            .all(|(a, b)| (a - b).abs() < 1e-12));

        let line = PhaseState::new(
            vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0, -1.0, 0.0],
            vec![1.0, 1.0],
            3,
        )
        .unwrap();
        assert!(matches!(
            project_zero_angular_momentum(&line),
            Err(Error::SingularInertia { .. })
        ));
    }

    #[test]
    fn timestep_zero_fraction_and_range() {
        let mut r = rng();
        let dist = TimestepDist {
            kind: TimestepKind::mixture_default(),
            dt_max: 1.0,
            q_zero: 0.75,
        };
        let n = 100_000;
        let zeros = (0..n).filter(|_| dist.sample(&mut r) == 0.0).count();
        assert!((zeros as f64 / n as f64 - 0.75).abs() < 0.0075);

        let uniform = TimestepDist {
            kind: TimestepKind::Uniform,
            dt_max: 2.5,
            q_zero: 0.0,
        };
        assert!((0..10_000)
            .map(|_| uniform.sample(&mut r))
            .all(|t| (0.0..=2.5).contains(&t)));

        let logit = TimestepDist {
            kind: TimestepKind::logit_normal_default(),
            dt_max: 1.0,
            q_zero: 0.0,
        };
        assert!((0..10_000)
            .map(|_| logit.sample(&mut r))
            .all(|t| (0.0..=1.0).contains(&t)));
    }

    #[test]
    fn generation_is_independent_of_worker_count() {
        let sys = SystemParams::Gravity {
            g: 1.0,
            softening: 0.1,
        };
        let cfg = GenConfig {
            samples: 600,
            positions: FixedEnergy {
                e_tot: -1.0,
                bounds: PositionBox::cube(3, 1.0),
                count: 4,
                max_tries: 100_000,
                zero_total_momentum: true,
            },
            momenta: MomentumMode::FixedEnergy,
            evolve: None,
        };
        let (a, _) = generate_dataset(&sys, &cfg, 5, 1).unwrap();
        let (b, rep) = generate_dataset(&sys, &cfg, 5, 3).unwrap();
        assert_eq!(a, b);
        assert!(rep.acceptance_rate > 0.0);
        assert!(a.max_energy_error(-1.0).unwrap() < 1e-10);
        for s in &a.samples {
            assert!(s.state.total_momentum().iter().all(|p| p.abs() < 1e-12));
        }
    }

    #[test]
    fn evolved_samples_stay_near_the_shell_with_consistent_forces() {
        let sys = SystemParams::Gravity {
            g: 1.0,
            softening: 0.2,
        };
        let mut cfg = GenConfig {
            samples: 40,
            positions: FixedEnergy {
                e_tot: -1.0,
                bounds: PositionBox::cube(3, 1.0),
                count: 4,
                max_tries: 100_000,
                zero_total_momentum: true,
            },
            momenta: MomentumMode::FixedEnergy,
            evolve: Some(Evolve {
                dt: 1e-3,
                t_max: 0.5,
            }),
        };
        let (a, _) = generate_dataset(&sys, &cfg, 9, 1).unwrap();
        assert!(a.max_energy_error(-1.0).unwrap() < 1e-3);
        for s in &a.samples {
            assert_eq!(s.force, sys.force(&s.state).unwrap());
            assert!(s.state.total_momentum().iter().all(|p| p.abs() < 1e-10));
        }
        cfg.evolve = None;
        let (b, _) = generate_dataset(&sys, &cfg, 9, 1).unwrap();
        let moved = a
            .samples
            .iter()
            .zip(&b.samples)
            .filter(|(x, y)| x.state != y.state)
            .count();
        assert!(moved > 30);
    }

    proptest::proptest! {
        #[test]
        fn drift_removal_is_exact(p in proptest::collection::vec(-3.0f64..3.0, 12), m in proptest::collection::vec(0.5f64..3.0, 4)) {
            let s = PhaseState::new(vec![0.0; 12], p, m, 3).unwrap();
            if let Ok(r) = remove_drift_and_rescale(&s, RescaleTarget::PreserveKinetic) {
                proptest::prop_assert!(r.total_momentum().iter().all(|v| v.abs() <= 1e-12));
                proptest::prop_assert!((r.kinetic_energy() - s.kinetic_energy()).abs() <= 1e-10 * s.kinetic_energy().max(1e-300));
            }
        }
    }
}
