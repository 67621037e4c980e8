//! Optimization loop: Adam, warmup plus cosine decay, global norm clipping.

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::random_rotation;
use crate::loss::{loss_and_grad, LossConfig, LossReport};
use crate::net::{Affine, FlowNet, Normalization};
use crate::rng::{self, purpose};
use crate::sampling::{resample_momenta, Dataset, MomentumSamplerCfg, Sample, TimestepDist};
use crate::state::rotate_state;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr_warm_start: f64,
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_frac: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps in total, if set.
    pub max_steps: Option<usize>,
    pub seed: u64,
    /// Call the checkpoint hook every this many epochs (0 disables it).
    pub checkpoint_every: usize,
    /// Randomly rotate each training example (3D systems only).
    pub rotation_augmentation: bool,
    /// Redraw momenta every epoch from this distribution.
    pub resample_momenta: Option<MomentumSamplerCfg>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            lr_warm_start: 1e-6,
            lr_max: 1e-4,
            lr_min: 1e-8,
            warmup_frac: 0.01,
            clip_norm: 5.0,
            batch_size: 256,
            epochs: 100,
            max_steps: None,
            seed: 0,
            checkpoint_every: 0,
            rotation_augmentation: false,
            resample_momenta: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.warmup_frac)
            && self.lr_min <= self.lr_max
            && self.lr_min >= 0.0
            && self.lr_warm_start >= 0.0
            && self.clip_norm > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.batch_size > 0;
        if !ok {
            return Err(Error::Config(format!("invalid training config {self:?}")));
        }
        if let Some(m) = &self.resample_momenta {
            m.validate()?;
        }
        Ok(())
    }

    fn warmup_steps(&self, total: usize) -> usize {
        (self.warmup_frac * total as f64).ceil() as usize
    }
}

/// Learning rate at `step` of `total`: linear warmup from `lr_warm_start`
/// to `lr_max`, then cosine decay to `lr_min` at `step == total`.
pub fn lr_at(step: usize, total: usize, cfg: &TrainConfig) -> f64 {
    let warm = cfg.warmup_steps(total).min(total);
    if step < warm {
        return cfg.lr_warm_start + (cfg.lr_max - cfg.lr_warm_start) * step as f64 / warm as f64;
    }
    if total <= warm {
        return cfg.lr_max;
    }
    let progress = ((step - warm) as f64 / (total - warm) as f64).min(1.0);
    cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// First and second moment estimates of Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// Bias-corrected Adam update without weight decay.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [f64],
    grad: &[f64],
    lr: f64,
    cfg: &TrainConfig,
) {
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (((w, g), m), v) in params
        .iter_mut()
        .zip(grad)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
    }
}

/// Scales `grad` down to norm `clip` if it is longer; returns the original norm.
pub fn clip_global_norm(grad: &mut [f64], clip: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > clip {
        let s = clip / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Input and output normalization fitted to a dataset.
pub fn fit_normalization(dataset: &Dataset) -> Normalization {
    let s = &dataset.samples;
    Normalization {
        position: Affine::fit(s.iter().flat_map(|s| s.state.positions())),
        momentum: Affine::fit(s.iter().flat_map(|s| s.state.momenta())),
        velocity: Affine::fit(s.iter().flat_map(|s| &s.velocity)),
        force: Affine::fit(s.iter().flat_map(|s| &s.force)),
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub total: f64,
    pub velocity_term: f64,
    pub force_term: f64,
    pub w_v: f64,
    pub w_f: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "step,total,velocity_term,force_term,w_v,w_f,lr,grad_norm";

    fn new(step: usize, r: &LossReport, lr: f64, grad_norm: f64) -> Self {
        Self {
            step,
            total: r.total,
            velocity_term: r.velocity_term,
            force_term: r.force_term,
            w_v: r.w_v,
            w_f: r.w_f,
            lr,
            grad_norm,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.step,
            self.total,
            self.velocity_term,
            self.force_term,
            self.w_v,
            self.w_f,
            self.lr,
            self.grad_norm
        )
    }
}

/// Everything needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub net: FlowNet,
    pub adam: AdamState,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Completed epochs.
    pub epoch: usize,
}

impl TrainState {
    pub fn fresh(net: FlowNet) -> Self {
        let n = net.param_count();
        Self {
            net,
            adam: AdamState::new(n),
            step: 0,
            epoch: 0,
        }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// The last state whose loss and gradient were finite.
    pub state: TrainState,
    pub log: Vec<LogRow>,
    /// Set when training stopped on a non-finite loss or gradient.
    pub aborted: Option<String>,
}

/// Total optimizer steps of a run over `len` samples.
pub fn planned_steps(len: usize, cfg: &TrainConfig) -> usize {
    let full = cfg.epochs * (len / cfg.batch_size);
    cfg.max_steps.map_or(full, |m| m.min(full))
}

fn rotate_vec(v: &[f64], rot: &nalgebra::Matrix3<f64>) -> Vec<f64> {
    v.chunks(3)
        .flat_map(|c| {
            let r = rot * Vector3::new(c[0], c[1], c[2]);
            [r.x, r.y, r.z]
        })
        .collect()
}

/// Draws this epoch's timesteps (and momenta or rotations, when enabled).
fn prepare_epoch(
    dataset: &Dataset,
    order: &[usize],
    epoch: u64,
    cfg: &TrainConfig,
    dist: &TimestepDist,
) -> Result<Vec<Sample>> {
    let mut t_rng = rng::stream(cfg.seed, purpose::TIMESTEP, epoch);
    let mut m_rng = rng::stream(cfg.seed, purpose::MOMENTA, epoch);
    let mut a_rng = rng::stream(cfg.seed, purpose::AUGMENT, epoch);
    order
        .iter()
        .map(|&i| {
            let mut s = dataset.samples[i].clone();
            if let Some(m) = &cfg.resample_momenta {
                let st = resample_momenta(&s.state, m, &mut m_rng);
                s = s.with_state(st);
            }
            if cfg.rotation_augmentation {
                let rot = random_rotation(&mut a_rng);
                let pivot = s.state.mean_position();
                let st = rotate_state(&s.state, &rot, &pivot)?;
                s.force = rotate_vec(&s.force, &rot);
                s = s.with_state(st);
            }
            Ok(s.with_timestep(dist.sample(&mut t_rng)))
        })
        .collect()
}

/// Trains `state` on `dataset`. Sample order, timesteps and optional
/// momentum redraws are seeded per epoch, so a run is a pure function of its
/// inputs. `on_epoch` is called after each completed epoch whose index is a
/// multiple of `checkpoint_every`, and always after the last one.
pub fn train<F>(
    dataset: &Dataset,
    mut state: TrainState,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    dist: &TimestepDist,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&TrainState, &[LogRow]) -> Result<()>,
{
    cfg.validate()?;
    loss_cfg.validate()?;
    dist.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if cfg.rotation_augmentation && dataset.dims != 3 {
        return Err(Error::Unsupported(format!(
            "rotation augmentation in {}D",
            dataset.dims
        )));
    }
    if state.adam.m.len() != state.net.param_count() {
        return Err(Error::Mismatch(
            "optimizer state does not match the network".into(),
        ));
    }
    let per_epoch = dataset.len() / cfg.batch_size;
    if per_epoch == 0 {
        return Err(Error::Config(format!(
            "batch size {} exceeds dataset size {}",
            cfg.batch_size,
            dataset.len()
        )));
    }
    let total = planned_steps(dataset.len(), cfg);
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    while state.epoch < cfg.epochs && state.step < total {
        let epoch = state.epoch as u64;
        order.iter_mut().enumerate().for_each(|(i, o)| *o = i);
        order.shuffle(&mut rng::stream(cfg.seed, purpose::SHUFFLE, epoch));
        let samples = prepare_epoch(dataset, &order, epoch, cfg, dist)?;
        for batch in samples.chunks_exact(cfg.batch_size) {
            if state.step >= total {
                break;
            }
            let (report, mut grad) = match loss_and_grad(&state.net, batch, loss_cfg) {
                Ok(v) => v,
                Err(Error::NonFinite(msg)) => {
                    return Ok(TrainOutcome {
                        state,
                        log,
                        aborted: Some(msg),
                    })
                }
                Err(e) => return Err(e),
            };
            let lr = lr_at(state.step, total, cfg);
            let norm = clip_global_norm(&mut grad, cfg.clip_norm);
            if !norm.is_finite() {
                let msg = format!("gradient norm {norm} at step {}", state.step);
                return Ok(TrainOutcome {
                    state,
                    log,
                    aborted: Some(msg),
                });
            }
            log.push(LogRow::new(state.step, &report, lr, norm));
            let TrainState { net, adam, .. } = &mut state;
            adam_step(adam, net.params_mut(), &grad, lr, cfg);
            state.step += 1;
        }
        state.epoch += 1;
        let last = state.epoch >= cfg.epochs || state.step >= total;
        if last || (cfg.checkpoint_every > 0 && state.epoch.is_multiple_of(cfg.checkpoint_every)) {
            on_epoch(&state, &log)?;
        }
    }
    Ok(TrainOutcome {
        state,
        log,
        aborted: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::ArchConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig::default();
        let total = 1000;
        assert_eq!(lr_at(0, total, &cfg), 1e-6);
        assert!((lr_at(10, total, &cfg) - 1e-4).abs() < 1e-18);
        assert!((lr_at(total, total, &cfg) - 1e-8).abs() < 1e-20);
        assert!(lr_at(500, total, &cfg) < 1e-4 && lr_at(500, total, &cfg) > 1e-8);
        assert!(lr_at(5, total, &cfg) > lr_at(4, total, &cfg));
    }

    #[test]
    fn adam_matches_scalar_recomputation() {
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 50;
        let mut w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut st = AdamState::new(n);
        let (mut wr, mut mr, mut vr) = (w.clone(), vec![0.0; n], vec![0.0; n]);
        for t in 1..=5 {
            let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            adam_step(&mut st, &mut w, &g, 1e-3, &cfg);
            for i in 0..n {
                mr[i] = 0.9 * mr[i] + 0.1 * g[i];
                vr[i] = 0.95 * vr[i] + 0.05 * g[i] * g[i];
                let mh = mr[i] / (1.0 - 0.9f64.powi(t));
                let vh = vr[i] / (1.0 - 0.95f64.powi(t));
                wr[i] -= 1e-3 * mh / (vh.sqrt() + 1e-8);
            }
        }
        for i in 0..n {
            assert!((w[i] - wr[i]).abs() <= 1e-14);
        }
    }

    #[test]
    fn adam_basics() {
        let cfg = TrainConfig::default();
        let mut st = AdamState::new(1);
        let mut w = [1.0];
        adam_step(&mut st, &mut w, &[0.0], 0.1, &cfg);
        assert_eq!(w, [1.0]);
        let mut st = AdamState::new(1);
        let g = [w[0]];
        adam_step(&mut st, &mut w, &g, 0.1, &cfg);
        assert!(w[0].abs() < 1.0);
    }

    #[test]
    fn clipping() {
        let mut g = [3.0, 0.0];
        assert_eq!(clip_global_norm(&mut g, 5.0), 3.0);
        assert_eq!(g, [3.0, 0.0]);
        let mut g = [6.0, 8.0];
        clip_global_norm(&mut g, 5.0);
        assert!((g[0] - 3.0).abs() < 1e-15 && (g[1] - 4.0).abs() < 1e-15);
        let mut z = [0.0; 3];
        assert_eq!(clip_global_norm(&mut z, 5.0), 0.0);
        assert_eq!(z, [0.0; 3]);
    }

    fn tiny_dataset(n: usize) -> Dataset {
        use crate::sampling::{
            generate_dataset, FixedEnergy, GenConfig, MomentumMode, PositionBox,
        };
        use crate::systems::SystemParams;
        let sys = SystemParams::HarmonicOscillator { omega: 1.0 };
        let cfg = GenConfig {
            samples: n,
            positions: FixedEnergy {
                e_tot: 0.5,
                bounds: PositionBox::default_for(&sys, 1),
                count: 1,
                max_tries: 1000,
                zero_total_momentum: false,
            },
            momenta: MomentumMode::FixedEnergy,
            evolve: None,
        };
        generate_dataset(&sys, &cfg, 3, 1).unwrap().0
    }

    #[test]
    fn training_is_deterministic_and_counts_steps() {
        let data = tiny_dataset(40);
        let cfg = TrainConfig {
            batch_size: 8,
            epochs: 3,
            lr_max: 1e-3,
            ..TrainConfig::default()
        };
        let dist = TimestepDist {
            kind: crate::sampling::TimestepKind::Uniform,
            dt_max: 1.0,
            q_zero: 0.5,
        };
        let run = || {
            let net = FlowNet::init(
                ArchConfig::with_width(8),
                1,
                1,
                1.0,
                &mut rng::stream(1, purpose::INIT, 0),
            )
            .unwrap();
            let mut calls = 0;
            let out = train(
                &data,
                TrainState::fresh(net),
                &cfg,
                &LossConfig::default(),
                &dist,
                |_, _| {
                    calls += 1;
                    Ok(())
                },
            )
            .unwrap();
            (out, calls)
        };
        let (a, calls) = run();
        let (b, _) = run();
        assert_eq!(calls, 1);
        assert!(a.aborted.is_none());
        assert_eq!(a.state.step, 15);
        assert_eq!(a.log.len(), 15);
        assert_eq!(a.state.net.params(), b.state.net.params());
        assert!(a.log.iter().all(|r| r.total.is_finite()));
    }

    #[test]
    fn resume_continues_the_step_count() {
        let data = tiny_dataset(32);
        let dist = TimestepDist {
            kind: crate::sampling::TimestepKind::Uniform,
            dt_max: 1.0,
            q_zero: 0.0,
        };
        let net = FlowNet::init(
            ArchConfig::with_width(8),
            1,
            1,
            1.0,
            &mut rng::stream(2, purpose::INIT, 0),
        )
        .unwrap();
        let full_cfg = TrainConfig {
            batch_size: 8,
            epochs: 4,
            ..TrainConfig::default()
        };
        let full = train(
            &data,
            TrainState::fresh(net.clone()),
            &full_cfg,
            &LossConfig::default(),
            &dist,
            |_, _| Ok(()),
        )
        .unwrap();
        let half_cfg = TrainConfig {
            max_steps: None,
            epochs: 2,
            ..full_cfg.clone()
        };
        let first = train(
            &data,
            TrainState::fresh(net),
            &half_cfg,
            &LossConfig::default(),
            &dist,
            |_, _| Ok(()),
        )
        .unwrap();
        assert_eq!(first.state.step, 8);
        let second = train(
            &data,
            first.state,
            &full_cfg,
            &LossConfig::default(),
            &dist,
            |_, _| Ok(()),
        )
        .unwrap();
        assert_eq!(second.state.step, 16);
        assert_eq!(second.log[0].step, 8);
        assert_eq!(full.state.step, 16);
    }

    #[test]
    fn non_finite_loss_aborts_with_last_good_state() {
        let mut data = tiny_dataset(16);
        data.samples[3].force[0] = f64::NAN;
        let dist = TimestepDist {
            kind: crate::sampling::TimestepKind::Uniform,
            dt_max: 1.0,
            q_zero: 0.0,
        };
        let net = FlowNet::init(
            ArchConfig::with_width(4),
            1,
            1,
            1.0,
            &mut rng::stream(3, purpose::INIT, 0),
        )
        .unwrap();
        let cfg = TrainConfig {
            batch_size: 16,
            epochs: 2,
            ..TrainConfig::default()
        };
        let out = train(
            &data,
            TrainState::fresh(net.clone()),
            &cfg,
            &LossConfig::default(),
            &dist,
            |_, _| Ok(()),
        )
        .unwrap();
        assert!(out.aborted.is_some());
        assert_eq!(out.state.step, 0);
        assert_eq!(out.state.net, net);
    }
}
