//! Inference-time corrections applied around or after each learned step.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::{inertia_tensor, invert_inertia, rotate_state, PhaseState};

/// Eigenvalue ratio below which the inertia tensor counts as singular.
pub const INERTIA_CUTOFF: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FilterSpec {
    /// Conjugate the step with a uniformly random rotation (3D only).
    RandomRotation,
    RemoveDrift,
    CoupledConservation,
    Langevin {
        temperature: f64,
        gamma: f64,
        #[serde(default = "one")]
        k_b: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl FilterSpec {
    pub fn validate(&self, dims: usize) -> Result<()> {
        match *self {
            FilterSpec::RandomRotation if dims != 3 => {
                Err(Error::Unsupported(format!("random rotation in {dims}D")))
            }
            FilterSpec::Langevin {
                temperature,
                gamma,
                k_b,
            } if !(temperature >= 0.0 && gamma >= 0.0 && k_b > 0.0) => Err(Error::Config(format!(
                "invalid thermostat T={temperature}, gamma={gamma}, k_B={k_b}"
            ))),
            _ => Ok(()),
        }
    }
}

/// Targets for the coupled filter, taken from the state before the step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConservationTargets {
    pub k_tgt: f64,
    pub l_tgt: [f64; 3],
    pub e_pot_before: f64,
    pub e_pot_after: f64,
}

impl ConservationTargets {
    /// `K_tgt = K_next - dE_tot`, i.e. the kinetic energy that restores the
    /// total energy of `prev`, and `L_tgt = L(prev)`.
    pub fn from_step(
        prev: &PhaseState,
        next: &PhaseState,
        e_pot_before: f64,
        e_pot_after: f64,
    ) -> Self {
        let k_next = next.kinetic_energy();
        let de = (e_pot_after + k_next) - (e_pot_before + prev.kinetic_energy());
        Self {
            k_tgt: k_next - de,
            l_tgt: prev.angular_momentum(),
            e_pot_before,
            e_pot_after,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    None,
    /// No real root: only the angular-momentum constraint was enforced.
    AngularOnly,
    /// Degenerate inertia (or 1D): only the kinetic energy was enforced.
    EnergyOnly,
    /// Neither constraint could be enforced; momenta left as they were.
    Unchanged,
}

impl Fallback {
    pub fn code(self) -> u8 {
        match self {
            Fallback::None => 0,
            Fallback::AngularOnly => 1,
            Fallback::EnergyOnly => 2,
            Fallback::Unchanged => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        [
            Fallback::None,
            Fallback::AngularOnly,
            Fallback::EnergyOnly,
            Fallback::Unchanged,
        ]
        .into_iter()
        .find(|f| f.code() == code)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterDiagnostics {
    /// Chosen `lambda = 1 + alpha` (1 when no rescale happened).
    pub lambda: f64,
    /// Discriminant of the quadratic in `lambda`; NaN when it was never formed.
    pub discriminant: f64,
    pub fallback: Fallback,
    /// Euclidean norm of the momentum change.
    pub correction_norm: f64,
}

/// Momentum shift that restores the previous total momentum, plus the
/// translation that moves the center of mass in uniform linear motion.
pub fn remove_drift_filter(prev: &PhaseState, next: &PhaseState, dt: f64) -> Result<PhaseState> {
    if prev.count() != next.count() || prev.dims() != next.dims() {
        return Err(Error::Mismatch(
            "drift filter states differ in shape".into(),
        ));
    }
    let d = next.dims();
    let total = next.total_mass();
    let p_prev = prev.total_momentum();
    let p_next = next.total_momentum();
    let com_prev = prev.center_of_mass();
    let com_next = next.center_of_mass();
    let mut x = next.positions().to_vec();
    let mut p = next.momenta().to_vec();
    for (i, m) in next.masses().iter().enumerate() {
        for k in 0..d {
            p[i * d + k] -= m / total * (p_next[k] - p_prev[k]);
            x[i * d + k] += -com_next[k] + com_prev[k] + dt * p_prev[k] / total;
        }
    }
    Ok(next.with_coordinates(x, p))
}

/// Uniform rotation from a normalized Gaussian quaternion.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Matrix3<f64> {
    loop {
        let c: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let q = Quaternion::new(c[0], c[1], c[2], c[3]);
        if q.norm() > 1e-12 {
            return *UnitQuaternion::from_quaternion(q)
                .to_rotation_matrix()
                .matrix();
        }
    }
}

/// `R^-1 . step . R`, rotating positions about the mean position of `state`
/// and momenta about the origin. The inverse uses the same pivot, so an
/// equivariant step gives an output independent of `R`.
pub fn random_rotation_wrap<R, F>(state: &PhaseState, rng: &mut R, step: F) -> Result<PhaseState>
where
    R: Rng + ?Sized,
    F: FnOnce(&PhaseState) -> Result<PhaseState>,
{
    if state.dims() != 3 {
        return Err(Error::Unsupported(format!(
            "random rotation in {}D",
            state.dims()
        )));
    }
    let rot = random_rotation(rng);
    rotation_wrap(state, &rot, step)
}

/// [`random_rotation_wrap`] with a given rotation.
pub fn rotation_wrap<F>(state: &PhaseState, rot: &Matrix3<f64>, step: F) -> Result<PhaseState>
where
    F: FnOnce(&PhaseState) -> Result<PhaseState>,
{
    let pivot = state.mean_position();
    let rotated = rotate_state(state, rot, &pivot)?;
    let stepped = step(&rotated)?;
    rotate_state(&stepped, &rot.transpose(), &pivot)
}

fn write_back(state: &PhaseState, p3: &[Vector3<f64>]) -> PhaseState {
    let d = state.dims();
    let mut p = vec![0.0; state.len()];
    for (i, v) in p3.iter().enumerate() {
        p[i * d..(i + 1) * d].copy_from_slice(&v.as_slice()[..d]);
    }
    state.with_momenta(p)
}

fn correction(a: &PhaseState, b: &PhaseState) -> f64 {
    a.momenta()
        .iter()
        .zip(b.momenta())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn energy_only(
    next: &PhaseState,
    k_tgt: f64,
    discriminant: f64,
) -> (PhaseState, FilterDiagnostics) {
    let k = next.kinetic_energy();
    if !(k > 0.0) || !(k_tgt >= 0.0) || !k_tgt.is_finite() {
        let diag = FilterDiagnostics {
            lambda: 1.0,
            discriminant,
            fallback: Fallback::Unchanged,
            correction_norm: 0.0,
        };
        return (next.clone(), diag);
    }
    let s = (k_tgt / k).sqrt();
    let out = next.with_momenta(next.momenta().iter().map(|p| p * s).collect());
    let diag = FilterDiagnostics {
        lambda: 1.0 / s,
        discriminant,
        fallback: Fallback::EnergyOnly,
        correction_norm: correction(&out, next),
    };
    (out, diag)
}

/// Smallest change of momenta, in the metric `sum |dp_i|^2 / 2 m_i`, that
/// gives kinetic energy `K_tgt` and angular momentum `L_tgt` about the
/// center of mass. Positions are never touched.
///
/// With `lambda = 1 + alpha` the stationary point is `p' = p0 / lambda + p1`,
/// where `p0` is `p` with its rigid rotation removed and `p1` is the rigid
/// rotation carrying `L_tgt`; the energy constraint then reads
/// `(C - K) lambda^2 + B lambda + A = 0`.
pub fn coupled_conservation_filter(
    next: &PhaseState,
    targets: &ConservationTargets,
) -> (PhaseState, FilterDiagnostics) {
    let k_tgt = targets.k_tgt;
    if next.dims() == 1 || next.count() < 2 {
        return energy_only(next, k_tgt, f64::NAN);
    }
    let masses = next.masses();
    let rel = next.relative_positions3();
    let mom = next.momenta3();
    let inv = match invert_inertia(&inertia_tensor(&rel, masses), INERTIA_CUTOFF) {
        Ok(inv) => inv,
        Err(_) => return energy_only(next, k_tgt, f64::NAN),
    };
    let l_cur = rel
        .iter()
        .zip(&mom)
        .fold(Vector3::zeros(), |acc, (r, p)| acc + r.cross(p));
    let l_tgt = Vector3::from(targets.l_tgt);
    let w_cur = inv * l_cur;
    let w_tgt = inv * l_tgt;
    let p0: Vec<Vector3<f64>> = (0..rel.len())
        .map(|i| mom[i] - masses[i] * w_cur.cross(&rel[i]))
        .collect();
    let p1: Vec<Vector3<f64>> = (0..rel.len())
        .map(|i| masses[i] * w_tgt.cross(&rel[i]))
        .collect();
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for i in 0..rel.len() {
        a += p0[i].norm_squared() / (2.0 * masses[i]);
        b += p0[i].dot(&p1[i]) / masses[i];
        c += p1[i].norm_squared() / (2.0 * masses[i]);
    }
    let quad = c - k_tgt;
    let discriminant = b * b - 4.0 * quad * a;
    let compose = |lambda: f64| -> PhaseState {
        let p3: Vec<Vector3<f64>> = p0.iter().zip(&p1).map(|(u, v)| u / lambda + v).collect();
        write_back(next, &p3)
    };
    let angular_only = || {
        let out = compose(1.0);
        let diag = FilterDiagnostics {
            lambda: 1.0,
            discriminant,
            fallback: Fallback::AngularOnly,
            correction_norm: correction(&out, next),
        };
        (out, diag)
    };
    if !(k_tgt > 0.0) || !discriminant.is_finite() || discriminant < 0.0 {
        return angular_only();
    }

    let scale = a + b.abs() + c + k_tgt;
    let mut roots = Vec::with_capacity(2);
    if quad.abs() <= 1e-14 * scale {
        if b != 0.0 {
            roots.push(-a / b);
        }
    } else {
        let q = -0.5 * (b + b.signum() * discriminant.sqrt());
        if q != 0.0 {
            roots.push(q / quad);
            roots.push(a / q);
        }
    }
    let objective = |s: &PhaseState| -> f64 {
        let d = s.dims();
        s.momenta()
            .iter()
            .zip(next.momenta())
            .enumerate()
            .map(|(j, (x, y))| (x - y).powi(2) / (2.0 * masses[j / d]))
            .sum()
    };
    let mut best: Option<(f64, f64, PhaseState)> = None;
    for lambda in roots.into_iter().filter(|l| l.is_finite() && *l != 0.0) {
        let cand = compose(lambda);
        let obj = objective(&cand);
        let better = match &best {
            None => true,
            Some((bo, bl, _)) => {
                let tie = (obj - bo).abs() <= 1e-12 * bo.abs().max(1e-300);
                if tie {
                    (lambda - 1.0).abs() < (bl - 1.0).abs()
                } else {
                    obj < *bo
                }
            }
        };
        if better {
            best = Some((obj, lambda, cand));
        }
    }
    match best {
        Some((_, lambda, out)) => {
            let diag = FilterDiagnostics {
                lambda,
                discriminant,
                fallback: Fallback::None,
                correction_norm: correction(&out, next),
            };
            (out, diag)
        }
        None => angular_only(),
    }
}

/// Exact Ornstein-Uhlenbeck update of the momenta.
pub fn langevin_thermostat<R: Rng + ?Sized>(
    state: &PhaseState,
    dt: f64,
    temperature: f64,
    gamma: f64,
    k_b: f64,
    rng: &mut R,
) -> Result<PhaseState> {
    FilterSpec::Langevin {
        temperature,
        gamma,
        k_b,
    }
    .validate(state.dims())?;
    let c1 = (-gamma * dt).exp();
    let c2 = (1.0 - c1 * c1).max(0.0).sqrt();
    let d = state.dims();
    let p = state
        .momenta()
        .iter()
        .enumerate()
        .map(|(j, p)| {
            let xi: f64 = StandardNormal.sample(rng);
            c1 * p + c2 * (state.masses()[j / d] * k_b * temperature).sqrt() * xi
        })
        .collect();
    Ok(state.with_momenta(p))
}
