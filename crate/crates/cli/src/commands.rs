//! One function per subcommand. Each reads the job config, writes its
//! artifacts under `cfg.out` and returns a JSON summary that is also stored
//! next to them. Summaries carry no timings, so reruns are byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use hfm_core::eval::{
    conservation_drift, distance_hist_mae, final_position_mse, metrics_csv, normalized_rmsd,
    trajectory_mse, MetricReport, TIME_MATCH_TOL,
};
use hfm_core::filters::Fallback;
use hfm_core::integrate::{
    rollout, vv_step, HfmStepper, RolloutOptions, Stepper, Trajectory, VelocityVerlet,
};
use hfm_core::io;
use hfm_core::net::FlowNet;
use hfm_core::rng::{self, purpose};
use hfm_core::sampling::{generate_dataset, sample_fixed_energy, GenConfig};
use hfm_core::train::{fit_normalization, train, TrainState};
use hfm_core::{FlowField, PhaseState, SystemParams};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{InitialSource, JobConfig, MetricKind, StepperKind};
use crate::error::{CliError, CliResult};

pub const DATASET_FILE: &str = "dataset.hfmd";
pub const CHECKPOINT_FILE: &str = "checkpoint.hfmc";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";

fn prepare_out(cfg: &JobConfig) -> CliResult<&Path> {
    fs::create_dir_all(&cfg.out).map_err(|e| CliError::io(&cfg.out, e))?;
    Ok(&cfg.out)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "input file does not exist"),
        ))
    }
}

fn finish(out: &Path, name: &str, summary: Value) -> CliResult<Value> {
    write_json(&out.join(name), &summary)?;
    Ok(summary)
}

pub fn gen(cfg: &JobConfig) -> CliResult<Value> {
    let sys = cfg.system;
    sys.validate()?;
    let section = cfg.gen_section()?;
    let gc = GenConfig {
        samples: section.samples,
        positions: section.shell(&sys),
        momenta: section.momenta,
        evolve: section.evolve,
    };
    let (data, report) = generate_dataset(&sys, &gc, cfg.seed, cfg.workers)?;
    let non_finite = data
        .samples
        .iter()
        .filter(|s| s.force.iter().any(|f| !f.is_finite()))
        .count();
    if non_finite > 0 {
        return Err(CliError::Numeric(format!(
            "{non_finite} samples have non-finite forces"
        )));
    }
    let out = prepare_out(cfg)?;
    let path = out.join(DATASET_FILE);
    io::save_dataset(&path, &data)?;
    if section.csv {
        write_text(&out.join("dataset.csv"), &io::dataset_csv(&data))?;
    }
    let summary = json!({
        "command": "gen",
        "system": sys.name(),
        "samples": data.len(),
        "count": data.count,
        "dims": data.dims,
        "seed": cfg.seed,
        "proposals": report.proposals,
        "acceptance_rate": report.acceptance_rate,
        "max_energy_error": data.max_energy_error(section.e_tot)?,
        "non_finite_forces": non_finite,
        "dataset": DATASET_FILE,
    });
    finish(out, "gen_report.json", summary)
}

pub fn train_cmd(cfg: &JobConfig) -> CliResult<Value> {
    let sys = cfg.system;
    let section = cfg.train_section()?;
    require_file(&section.dataset)?;
    let data = io::load_dataset(&section.dataset)?;
    if data.system != sys {
        return Err(CliError::Config(format!(
            "dataset was generated for {:?}, job declares {:?}",
            data.system, sys
        )));
    }
    let state = match &section.resume {
        Some(path) => {
            require_file(path)?;
            let state = io::load_checkpoint(path)?;
            if state.net.count() != data.count || state.net.dims() != data.dims {
                return Err(CliError::Config(
                    "checkpoint shape does not match the dataset".into(),
                ));
            }
            state
        }
        None => {
            let mut arch = section.arch.arch();
            if section.arch.normalize {
                arch.normalization = fit_normalization(&data);
            }
            let net = FlowNet::init(
                arch,
                data.count,
                data.dims,
                section.dt_max,
                &mut rng::stream(cfg.seed, purpose::INIT, 0),
            )?;
            TrainState::fresh(net)
        }
    };
    let start_step = state.step;
    let mut opt = section.optimizer.clone();
    opt.seed = cfg.seed;
    let out = prepare_out(cfg)?.to_path_buf();
    let ckpt = out.join(CHECKPOINT_FILE);
    let log_path = out.join(TRAIN_LOG_FILE);
    let save_optimizer = section.save_optimizer;
    let outcome = train(
        &data,
        state,
        &opt,
        &section.loss,
        &section.timestep_dist(),
        |st, log| {
            io::save_checkpoint(&ckpt, st, save_optimizer)?;
            std::fs::write(&log_path, io::log_csv(log))?;
            log::info!("epoch {} step {}", st.epoch, st.step);
            Ok(())
        },
    )?;
    io::save_checkpoint(&ckpt, &outcome.state, save_optimizer)?;
    write_text(&log_path, &io::log_csv(&outcome.log))?;
    let last = outcome.log.last();
    let summary = json!({
        "command": "train",
        "system": sys.name(),
        "seed": cfg.seed,
        "parameters": outcome.state.net.param_count(),
        "start_step": start_step,
        "step": outcome.state.step,
        "epoch": outcome.state.epoch,
        "final_loss": last.map(|r| r.total),
        "final_velocity_term": last.map(|r| r.velocity_term),
        "final_force_term": last.map(|r| r.force_term),
        "aborted": outcome.aborted,
        "checkpoint": CHECKPOINT_FILE,
        "log": TRAIN_LOG_FILE,
    });
    write_json(&out.join("train_report.json"), &summary)?;
    match outcome.aborted {
        Some(msg) => Err(CliError::Numeric(format!(
            "training stopped at step {}: {msg}",
            outcome.state.step
        ))),
        None => Ok(summary),
    }
}

fn initial_states(cfg: &JobConfig) -> CliResult<Vec<PhaseState>> {
    let sys = cfg.system;
    let section = cfg.simulate_section()?;
    let states = match &section.initial {
        InitialSource::Dataset { path, indices } => {
            require_file(path)?;
            let data = io::load_dataset(path)?;
            indices
                .iter()
                .map(|&i| {
                    data.samples.get(i).map(|s| s.state.clone()).ok_or_else(|| {
                        CliError::Config(format!(
                            "dataset has {} samples, index {i} requested",
                            data.len()
                        ))
                    })
                })
                .collect::<CliResult<Vec<_>>>()?
        }
        InitialSource::Shell { trajectories } => {
            let shell = cfg.gen_section()?.shell(&sys);
            let mut r = rng::stream(cfg.seed, purpose::EVAL, 0);
            (0..*trajectories)
                .map(|_| Ok(sample_fixed_energy(&sys, &shell, &mut r)?.state))
                .collect::<CliResult<Vec<_>>>()?
        }
        InitialSource::State {
            positions,
            momenta,
            dims,
            masses,
        } => {
            let count = positions.len() / dims.max(&1);
            let masses = masses.clone().unwrap_or_else(|| sys.default_masses(count));
            vec![PhaseState::new(
                positions.clone(),
                momenta.clone(),
                masses,
                *dims,
            )?]
        }
    };
    if states.is_empty() {
        return Err(CliError::Config("no initial states selected".into()));
    }
    for s in &states {
        sys.check_shape(s.count(), s.dims())?;
    }
    Ok(states)
}

#[derive(Serialize)]
struct RolloutSummary {
    index: usize,
    file: String,
    status: String,
    steps: usize,
    final_time: f64,
    energy_drift: f64,
    angular_momentum_drift: f64,
    fallbacks: usize,
}

pub fn simulate(cfg: &JobConfig) -> CliResult<Value> {
    let sys = cfg.system;
    sys.validate()?;
    let section = cfg.simulate_section()?;
    if !section.dt.is_finite() || section.dt < 0.0 {
        return Err(CliError::Config(format!("invalid timestep {}", section.dt)));
    }
    let net = match section.stepper {
        StepperKind::Vv => None,
        StepperKind::Hfm => {
            let path = section
                .checkpoint
                .as_ref()
                .ok_or_else(|| CliError::Config("the hfm stepper needs `checkpoint`".into()))?;
            require_file(path)?;
            let net = io::load_checkpoint(path)?.net;
            if section.dt > net.dt_max() {
                return Err(hfm_core::Error::TimestepOutOfRange {
                    dt: section.dt,
                    dt_max: net.dt_max(),
                }
                .into());
            }
            Some(net)
        }
    };
    let mut states = initial_states(cfg)?;
    for f in &section.filters {
        f.validate(states[0].dims())?;
    }
    let mut t0 = section.t0;
    if let Some(w) = section.warmup {
        for s in &mut states {
            for _ in 0..w.n_steps {
                *s = vv_step(&sys, s, w.dt)?;
            }
        }
        t0 += w.n_steps as f64 * w.dt;
    }
    let opts = RolloutOptions {
        t0,
        sanity_bound: section.sanity_bound,
    };
    let out = prepare_out(cfg)?.to_path_buf();
    let run_one = |(i, s0): (usize, &PhaseState)| -> CliResult<RolloutSummary> {
        let mut stepper: Box<dyn Stepper + '_> = match &net {
            Some(n) => Box::new(HfmStepper { field: n }),
            None => Box::new(VelocityVerlet::new(sys)),
        };
        let mut r = rng::stream(cfg.seed, purpose::SIMULATE, i as u64);
        let traj = rollout(
            stepper.as_mut(),
            s0,
            section.dt,
            section.n_steps,
            &section.filters,
            &sys,
            &opts,
            &mut r,
        )?;
        let file = format!("traj_{i:04}.hfmt");
        let path = out.join(&file);
        io::save_trajectory(&path, &traj, &sys)?;
        if section.csv {
            write_text(&path.with_extension("csv"), &io::trajectory_csv(&traj))?;
        }
        let drift = conservation_drift(&traj);
        Ok(RolloutSummary {
            index: i,
            file,
            status: traj.status.label().to_string(),
            steps: traj.len() - 1,
            final_time: *traj.times.last().expect("nonempty"),
            energy_drift: drift.energy,
            angular_momentum_drift: drift.angular_momentum,
            fallbacks: traj
                .filter_diagnostics
                .iter()
                .filter(|d| d.fallback != Fallback::None)
                .count(),
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let rollouts: Vec<RolloutSummary> = pool.install(|| {
        states
            .par_iter()
            .enumerate()
            .map(run_one)
            .collect::<CliResult<Vec<_>>>()
    })?;
    let summary = json!({
        "command": "simulate",
        "system": sys.name(),
        "stepper": section.stepper,
        "dt": section.dt,
        "n_steps": section.n_steps,
        "seed": cfg.seed,
        "filters": section.filters,
        "t0": t0,
        "trajectories": rollouts,
    });
    finish(&out, "simulate_report.json", summary)
}

fn end_time(t: &Trajectory) -> f64 {
    *t.times.last().expect("trajectories are never empty")
}

fn load_pair_member(path: &Path) -> CliResult<(Trajectory, SystemParams)> {
    require_file(path)?;
    Ok(io::load_trajectory(path)?)
}

pub fn eval(cfg: &JobConfig) -> CliResult<Value> {
    let section = cfg.eval_section()?;
    let mut reports = Vec::new();
    let mut pairs_json = Vec::new();
    for (k, pair) in section.pairs.iter().enumerate() {
        let (pred, sys_p) = load_pair_member(&pair.pred)?;
        let (reference, sys_r) = load_pair_member(&pair.reference)?;
        if sys_p != sys_r {
            return Err(CliError::Config(format!(
                "pair {k}: trajectories come from different systems ({:?} vs {:?})",
                sys_p, sys_r
            )));
        }
        let label = pair.label.clone().unwrap_or_else(|| format!("pair{k}"));
        let same_end = (end_time(&pred) - end_time(&reference)).abs() <= TIME_MATCH_TOL;
        let mut values = BTreeMap::new();
        let metrics = match &section.metrics {
            Some(m) => m.clone(),
            // pair distances need at least two particles
            None => MetricKind::ALL
                .into_iter()
                .filter(|m| *m != MetricKind::HrMae || pred.last().count() >= 2)
                .collect(),
        };
        for metric in &metrics {
            match metric {
                MetricKind::TrajectoryMse => {
                    values.insert("trajectory_mse", trajectory_mse(&pred, &reference)?);
                }
                MetricKind::FinalPositionMse | MetricKind::NormalizedRmsd if !same_end => {
                    return Err(hfm_core::Error::Mismatch(format!(
                        "pair {label}: final times differ ({} vs {})",
                        end_time(&pred),
                        end_time(&reference)
                    ))
                    .into());
                }
                MetricKind::FinalPositionMse => {
                    values.insert(
                        "final_position_mse",
                        final_position_mse(pred.last(), reference.last())?,
                    );
                }
                MetricKind::NormalizedRmsd => {
                    let (x, p) = normalized_rmsd(pred.last(), &reference)?;
                    values.insert("normalized_rmsd_position", x);
                    values.insert("normalized_rmsd_momentum", p);
                }
                MetricKind::HrMae => {
                    values.insert(
                        "hr_mae",
                        distance_hist_mae(&pred, &reference, section.bins, section.r_max)?,
                    );
                }
                MetricKind::ConservationDrift => {
                    let d = conservation_drift(&pred);
                    values.insert("energy_drift", d.energy);
                    values.insert("angular_momentum_drift", d.angular_momentum);
                    values.insert("momentum_drift", d.momentum);
                }
            }
        }
        for (name, value) in &values {
            reports.push(MetricReport {
                pair: label.clone(),
                name: name.to_string(),
                value: *value,
                system: sys_p.name().to_string(),
                dt: pred.dt,
                n_steps: pred.len() - 1,
                seed: cfg.seed,
            });
        }
        pairs_json.push(json!({
            "label": label,
            "pred": pair.pred,
            "reference": pair.reference,
            "status": pred.status.label(),
            "metrics": values,
        }));
    }
    let out = prepare_out(cfg)?;
    write_text(&out.join(METRICS_CSV), &metrics_csv(&reports))?;
    let summary = json!({ "command": "eval", "seed": cfg.seed, "pairs": pairs_json });
    finish(out, METRICS_JSON, summary)
}
