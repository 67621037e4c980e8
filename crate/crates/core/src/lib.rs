//! Learning Hamiltonian flow maps.
//!
//! A network predicts the mean velocity and force over a finite interval,
//! so a single evaluation advances a Hamiltonian system by a large timestep.
//! Training needs no trajectories: the target is built from instantaneous
//! forces and a forward-mode derivative of the network itself.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod error;
pub mod eval;
pub mod filters;
pub mod integrate;
pub mod io;
pub mod loss;
pub mod net;
pub mod rng;
pub mod sampling;
pub mod state;
pub mod systems;
pub mod train;

pub use error::{Error, Result};
pub use net::{ArchConfig, FlowField, FlowNet, OscillatorMeanField};
pub use sampling::{Dataset, Sample, TimestepDist, TimestepKind};
pub use state::PhaseState;
pub use systems::{Potential, SystemParams};
