//! Analytic Hamiltonian test systems.
//!
//! Every system is separable, `H = sum |p_i|^2 / 2 m_i + V(x)`, so a system
//! only has to supply the potential and its negative gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::PhaseState;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SystemParams {
    /// `V = omega^2 x^2 / 2`, one particle in 1D.
    HarmonicOscillator { omega: f64 },
    /// `V = m g y + k (|x| - l0)^2 / 2`, one particle in 2D (Cartesian).
    SpringPendulum { mass: f64, g: f64, k: f64, l0: f64 },
    /// `V = (wx^2 x^2 + wy^2 y^2) / 2 + lambda x^2 y^2`, one particle in 2D.
    Barbanis {
        omega_x: f64,
        omega_y: f64,
        lambda: f64,
    },
    /// Pairwise Plummer-softened gravity `-G m_i m_j / sqrt(r^2 + eps^2)`.
    Gravity { g: f64, softening: f64 },
}

/// Anything that can report the potential energy of a state.
pub trait Potential {
    fn potential_energy(&self, state: &PhaseState) -> Result<f64>;
}

impl Potential for SystemParams {
    fn potential_energy(&self, state: &PhaseState) -> Result<f64> {
        SystemParams::potential_energy(self, state)
    }
}

impl SystemParams {
    pub fn barbanis_default() -> Self {
        SystemParams::Barbanis {
            omega_x: 1.0,
            omega_y: 1.0,
            lambda: 10.0,
        }
    }

    pub fn spring_pendulum_default() -> Self {
        SystemParams::SpringPendulum {
            mass: 1.0,
            g: 9.81,
            k: 1.0,
            l0: 1.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SystemParams::HarmonicOscillator { .. } => "harmonic_oscillator",
            SystemParams::SpringPendulum { .. } => "spring_pendulum",
            SystemParams::Barbanis { .. } => "barbanis",
            SystemParams::Gravity { .. } => "gravity",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            SystemParams::HarmonicOscillator { omega } => omega > 0.0 && omega.is_finite(),
            SystemParams::SpringPendulum { mass, g, k, l0 } => {
                mass > 0.0
                    && k > 0.0
                    && l0 >= 0.0
                    && g.is_finite()
                    && mass.is_finite()
                    && k.is_finite()
            }
            SystemParams::Barbanis {
                omega_x,
                omega_y,
                lambda,
            } => omega_x.is_finite() && omega_y.is_finite() && lambda.is_finite(),
            SystemParams::Gravity { g, softening } => g > 0.0 && g.is_finite() && softening >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid parameters for {}: {self:?}",
                self.name()
            )))
        }
    }

    /// Spatial dimension the variant lives in, or `None` when it is free (gravity).
    pub fn fixed_dims(&self) -> Option<usize> {
        match self {
            SystemParams::HarmonicOscillator { .. } => Some(1),
            SystemParams::SpringPendulum { .. } | SystemParams::Barbanis { .. } => Some(2),
            SystemParams::Gravity { .. } => None,
        }
    }

    /// Checks that `count` particles in `dims` dimensions fit this variant.
    pub fn check_shape(&self, count: usize, dims: usize) -> Result<()> {
        let ok = match self {
            SystemParams::HarmonicOscillator { .. } => count == 1 && dims == 1,
            SystemParams::SpringPendulum { .. } | SystemParams::Barbanis { .. } => {
                count == 1 && dims == 2
            }
            SystemParams::Gravity { .. } => count >= 2 && (dims == 2 || dims == 3),
        };
        if ok {
            return Ok(());
        }
        let expected = match self {
            SystemParams::HarmonicOscillator { .. } => "1 particle in 1D".to_string(),
            SystemParams::Gravity { .. } => "N >= 2 particles in 2D or 3D".to_string(),
            _ => "1 particle in 2D".to_string(),
        };
        Err(Error::Shape {
            system: self.name(),
            expected,
            got: format!("{count} particle(s) in {dims}D"),
        })
    }

    /// Particle masses a fresh state of this system uses.
    pub fn default_masses(&self, count: usize) -> Vec<f64> {
        match *self {
            SystemParams::SpringPendulum { mass, .. } => vec![mass; count],
            _ => vec![1.0; count],
        }
    }

    pub fn potential_energy(&self, state: &PhaseState) -> Result<f64> {
        self.check_shape(state.count(), state.dims())?;
        let x = state.positions();
        Ok(match *self {
            SystemParams::HarmonicOscillator { omega } => 0.5 * omega * omega * x[0] * x[0],
            SystemParams::SpringPendulum { mass, g, k, l0 } => {
                let r = x[0].hypot(x[1]);
                mass * g * x[1] + 0.5 * k * (r - l0).powi(2)
            }
            SystemParams::Barbanis {
                omega_x,
                omega_y,
                lambda,
            } => {
                let (a, b) = (x[0], x[1]);
                0.5 * (omega_x * omega_x * a * a + omega_y * omega_y * b * b)
                    + lambda * a * a * b * b
            }
            SystemParams::Gravity { g, softening } => {
                let d = state.dims();
                let m = state.masses();
                let eps2 = softening * softening;
                let mut v = 0.0;
                for i in 0..state.count() {
                    for j in (i + 1)..state.count() {
                        let r2: f64 = (0..d).map(|k| (x[i * d + k] - x[j * d + k]).powi(2)).sum();
                        v -= g * m[i] * m[j] / (r2 + eps2).sqrt();
                    }
                }
                v
            }
        })
    }

    /// `-dV/dx`, laid out like the positions.
    pub fn force(&self, state: &PhaseState) -> Result<Vec<f64>> {
        self.check_shape(state.count(), state.dims())?;
        let x = state.positions();
        Ok(match *self {
            SystemParams::HarmonicOscillator { omega } => vec![-omega * omega * x[0]],
            SystemParams::SpringPendulum { mass, g, k, l0 } => {
                let r = x[0].hypot(x[1]);
                // the stretch term has no defined direction at the pivot
                let s = if r > 0.0 { k * (r - l0) / r } else { 0.0 };
                vec![-s * x[0], -mass * g - s * x[1]]
            }
            SystemParams::Barbanis {
                omega_x,
                omega_y,
                lambda,
            } => {
                let (a, b) = (x[0], x[1]);
                vec![
                    -(omega_x * omega_x * a + 2.0 * lambda * a * b * b),
                    -(omega_y * omega_y * b + 2.0 * lambda * a * a * b),
                ]
            }
            SystemParams::Gravity { g, softening } => {
                let d = state.dims();
                let m = state.masses();
                let eps2 = softening * softening;
                let mut f = vec![0.0; x.len()];
                let mut diff = [0.0; 3];
                for i in 0..state.count() {
                    for j in (i + 1)..state.count() {
                        let mut r2 = eps2;
                        for k in 0..d {
                            diff[k] = x[i * d + k] - x[j * d + k];
                            r2 += diff[k] * diff[k];
                        }
                        let s = g * m[i] * m[j] / (r2 * r2.sqrt());
                        for k in 0..d {
                            f[i * d + k] -= s * diff[k];
                            f[j * d + k] += s * diff[k];
                        }
                    }
                }
                f
            }
        })
    }

    pub fn total_energy(&self, state: &PhaseState) -> Result<f64> {
        Ok(state.kinetic_energy() + self.potential_energy(state)?)
    }

    /// Exact phase-space rotation of the unit-mass harmonic oscillator.
    pub fn exact_flow(&self, state: &PhaseState, dt: f64) -> Result<PhaseState> {
        let SystemParams::HarmonicOscillator { omega } = *self else {
            return Err(Error::Unsupported(format!("exact flow of {}", self.name())));
        };
        self.check_shape(state.count(), state.dims())?;
        if state.masses()[0] != 1.0 {
            return Err(Error::Unsupported("exact flow requires unit mass".into()));
        }
        let (x, p) = (state.positions()[0], state.momenta()[0]);
        let (s, c) = (omega * dt).sin_cos();
        Ok(state.with_coordinates(vec![x * c + p / omega * s], vec![-x * omega * s + p * c]))
    }

    /// Variant tag and parameters packed into the binary header layout.
    pub fn to_slots(&self) -> (u32, [f64; 8]) {
        let mut slots = [0.0; 8];
        let tag = match *self {
            SystemParams::HarmonicOscillator { omega } => {
                slots[0] = omega;
                0
            }
            SystemParams::SpringPendulum { mass, g, k, l0 } => {
                slots[..4].copy_from_slice(&[mass, g, k, l0]);
                1
            }
            SystemParams::Barbanis {
                omega_x,
                omega_y,
                lambda,
            } => {
                slots[..3].copy_from_slice(&[omega_x, omega_y, lambda]);
                2
            }
            SystemParams::Gravity { g, softening } => {
                slots[..2].copy_from_slice(&[g, softening]);
                3
            }
        };
        (tag, slots)
    }

    pub fn from_slots(tag: u32, s: &[f64; 8]) -> Result<Self> {
        let sys = match tag {
            0 => SystemParams::HarmonicOscillator { omega: s[0] },
            1 => SystemParams::SpringPendulum {
                mass: s[0],
                g: s[1],
                k: s[2],
                l0: s[3],
            },
            2 => SystemParams::Barbanis {
                omega_x: s[0],
                omega_y: s[1],
                lambda: s[2],
            },
            3 => SystemParams::Gravity {
                g: s[0],
                softening: s[1],
            },
            other => return Err(Error::Format(format!("unknown system tag {other}"))),
        };
        sys.validate()?;
        Ok(sys)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn one(x: Vec<f64>, p: Vec<f64>, dims: usize) -> PhaseState {
        PhaseState::new(x, p, vec![1.0], dims).unwrap()
    }

    #[test]
    fn potential_examples() {
        let b = SystemParams::barbanis_default();
        assert_eq!(
            b.potential_energy(&one(vec![0.0, 0.0], vec![0.0; 2], 2))
                .unwrap(),
            0.0
        );

        let sp = SystemParams::spring_pendulum_default();
        let v = sp
            .potential_energy(&one(vec![0.0, -1.0], vec![0.0; 2], 2))
            .unwrap();
        assert!((v + 9.81).abs() < 1e-15);

        let g = SystemParams::Gravity {
            g: 1.0,
            softening: 0.0,
        };
        let s = PhaseState::at_rest(vec![0.0, 0.0, 0.0, 2.0, 0.0, 0.0], vec![1.0, 1.0], 3).unwrap();
        assert_eq!(g.potential_energy(&s).unwrap(), -0.5);
    }

    #[test]
    fn force_examples() {
        let ho = SystemParams::HarmonicOscillator { omega: 1.0 };
        assert_eq!(ho.force(&one(vec![0.5], vec![0.0], 1)).unwrap(), vec![-0.5]);

        let b = SystemParams::barbanis_default();
        let f = b.force(&one(vec![0.1, 0.2], vec![0.0; 2], 2)).unwrap();
        // -(x + 2 lambda x y^2, y + 2 lambda x^2 y) at (0.1, 0.2)
        assert!((f[0] + (0.1 + 2.0 * 10.0 * 0.1 * 0.04)).abs() < 1e-15);
        assert!((f[1] + (0.2 + 2.0 * 10.0 * 0.01 * 0.2)).abs() < 1e-15);

        let g = SystemParams::Gravity {
            g: 1.0,
            softening: 0.0,
        };
        let s =
            PhaseState::at_rest(vec![-1.0, 0.5, 0.0, 1.0, -0.5, 0.0], vec![1.0, 1.0], 3).unwrap();
        let f = g.force(&s).unwrap();
        for k in 0..3 {
            assert_eq!(f[k] + f[3 + k], 0.0);
        }
    }

    #[test]
    fn shape_errors_name_the_variant() {
        let b = SystemParams::barbanis_default();
        let err = b.force(&one(vec![0.0], vec![0.0], 1)).unwrap_err();
        assert!(err.to_string().contains("barbanis"));
        let g = SystemParams::Gravity {
            g: 1.0,
            softening: 0.0,
        };
        assert!(g
            .potential_energy(&one(vec![0.0; 3], vec![0.0; 3], 3))
            .is_err());
    }

    #[test]
    fn total_energy_examples() {
        let ho = SystemParams::HarmonicOscillator { omega: 1.0 };
        assert_eq!(ho.total_energy(&one(vec![1.0], vec![0.0], 1)).unwrap(), 0.5);
        let b = SystemParams::barbanis_default();
        let s = one(vec![0.3, -0.4], vec![0.0; 2], 2);
        assert_eq!(b.total_energy(&s).unwrap(), b.potential_energy(&s).unwrap());
    }

    #[test]
    fn exact_flow_examples() {
        let ho = SystemParams::HarmonicOscillator { omega: 1.0 };
        let s = one(vec![1.0], vec![0.0], 1);
        let full = ho.exact_flow(&s, 2.0 * PI).unwrap();
        assert!((full.positions()[0] - 1.0).abs() < 1e-12 && full.momenta()[0].abs() < 1e-12);
        let quarter = ho.exact_flow(&s, PI / 2.0).unwrap();
        assert!(quarter.positions()[0].abs() < 1e-15 && (quarter.momenta()[0] + 1.0).abs() < 1e-15);
        assert_eq!(ho.exact_flow(&s, 0.0).unwrap(), s);
        assert!(SystemParams::barbanis_default()
            .exact_flow(&s, 1.0)
            .is_err());
    }

    #[test]
    fn exact_flow_conserves_energy() {
        let ho = SystemParams::HarmonicOscillator { omega: 1.7 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let s = one(
                vec![rng.gen_range(-2.0..2.0)],
                vec![rng.gen_range(-2.0..2.0)],
                1,
            );
            let e0 = ho.total_energy(&s).unwrap();
            let e1 = ho
                .total_energy(&ho.exact_flow(&s, rng.gen_range(0.0..50.0)).unwrap())
                .unwrap();
            assert!((e0 - e1).abs() < 1e-10);
        }
    }

    fn random_state(sys: &SystemParams, rng: &mut ChaCha8Rng) -> PhaseState {
        let (n, d) = match sys {
            SystemParams::HarmonicOscillator { .. } => (1, 1),
            SystemParams::Gravity { .. } => (4, 3),
            _ => (1, 2),
        };
        let x: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let m: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..2.0)).collect();
        PhaseState::at_rest(x, m, d).unwrap()
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn forces_match_finite_differences() {
        let systems = [
            SystemParams::HarmonicOscillator { omega: 1.3 },
            SystemParams::spring_pendulum_default(),
            SystemParams::barbanis_default(),
            SystemParams::Gravity {
                g: 1.0,
                softening: 0.1,
            },
        ];
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for sys in &systems {
            for _ in 0..100 {
                let s = random_state(sys, &mut rng);
                let f = sys.force(&s).unwrap();
                let scale = f.iter().fold(1e-3_f64, |a, v| a.max(v.abs()));
                for j in 0..s.len() {
                    let mut plus = s.clone();
                    plus.positions_mut()[j] += h;
                    let mut minus = s.clone();
                    minus.positions_mut()[j] -= h;
                    let fd = -(sys.potential_energy(&plus).unwrap()
                        - sys.potential_energy(&minus).unwrap())
                        / (2.0 * h);
                    assert!(
                        (fd - f[j]).abs() <= 1e-6 * scale,
                        "{sys:?} comp {j}: {fd} vs {}",
                        f[j]
                    );
                }
            }
        }
    }

    #[test]
    fn slots_round_trip() {
        for sys in [
            SystemParams::HarmonicOscillator { omega: 2.0 },
            SystemParams::spring_pendulum_default(),
            SystemParams::barbanis_default(),
            SystemParams::Gravity {
                g: 1.5,
                softening: 0.05,
            },
        ] {
            let (tag, slots) = sys.to_slots();
            assert_eq!(SystemParams::from_slots(tag, &slots).unwrap(), sys);
        }
    }
}
