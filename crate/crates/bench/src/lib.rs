//! Shared fixtures for the kernel benchmarks in `benches/`.

use hfm_core::rng::{self, purpose};
use hfm_core::sampling::{generate_dataset, FixedEnergy, GenConfig, MomentumMode, PositionBox};
use hfm_core::train::fit_normalization;
use hfm_core::{ArchConfig, Dataset, FlowNet, SystemParams};

pub const GRAVITY: SystemParams = SystemParams::Gravity {
    g: 1.0,
    softening: 0.1,
};

/// Fixed-energy gravity samples with `count` bodies in 3D, each tagged with
/// timestep `dt` so that consistency targets are non-trivial.
pub fn gravity_dataset(samples: usize, count: usize, dt: f64, seed: u64) -> Dataset {
    let gen = GenConfig {
        samples,
        positions: FixedEnergy {
            e_tot: -0.5 * count as f64,
            bounds: PositionBox::cube(3, 1.0),
            count,
            max_tries: 1_000_000,
            zero_total_momentum: true,
        },
        momenta: MomentumMode::FixedEnergy,
        evolve: None,
    };
    let (mut data, _) = generate_dataset(&GRAVITY, &gen, seed, 1).expect("benchmark dataset");
    for s in &mut data.samples {
        s.timestep = dt;
    }
    data
}

pub fn net_for(data: &Dataset, width: usize, seed: u64) -> FlowNet {
    let mut arch = ArchConfig::with_width(width);
    arch.normalization = fit_normalization(data);
    FlowNet::init(
        arch,
        data.count,
        data.dims,
        0.1,
        &mut rng::stream(seed, purpose::INIT, 0),
    )
    .expect("benchmark network")
}
