//! Little-endian binary formats for datasets, checkpoints and trajectories,
//! plus CSV exports.
//!
//! Every binary file starts with a four-byte magic and a `u32` version.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::filters::{Fallback, FilterDiagnostics};
use crate::integrate::{Diagnostics, RolloutStatus, Trajectory};
use crate::net::{Activation, Affine, ArchConfig, FlowNet, Normalization};
use crate::sampling::{Dataset, Sample};
use crate::state::PhaseState;
use crate::systems::SystemParams;
use crate::train::{AdamState, TrainState};

pub const DATASET_MAGIC: &[u8; 4] = b"HFMD";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HFMC";
pub const TRAJECTORY_MAGIC: &[u8; 4] = b"HFMT";
pub const VERSION: u32 = 1;

/// Guard against absurd allocations from corrupt headers.
const MAX_ELEMENTS: u64 = 1 << 34;

fn write_header<W: Write>(w: &mut W, magic: &[u8; 4]) -> Result<()> {
    w.write_all(magic)?;
    w.write_u32::<LE>(VERSION)?;
    Ok(())
}

fn read_header<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<()> {
    let mut got = [0u8; 4];
    r.read_exact(&mut got)?;
    if &got != magic {
        return Err(Error::Format(format!(
            "expected magic {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&got)
        )));
    }
    let version = r.read_u32::<LE>()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    Ok(())
}

fn write_f64s<W: Write>(w: &mut W, v: &[f64]) -> Result<()> {
    for x in v {
        w.write_f64::<LE>(*x)?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut v = vec![0.0; n];
    r.read_f64_into::<LE>(&mut v)?;
    Ok(v)
}

fn checked_len(n: u64, what: &str) -> Result<usize> {
    if n > MAX_ELEMENTS {
        return Err(Error::Format(format!(
            "{what} count {n} is implausibly large"
        )));
    }
    Ok(n as usize)
}

fn write_system<W: Write>(w: &mut W, sys: &SystemParams) -> Result<()> {
    let (tag, slots) = sys.to_slots();
    w.write_u32::<LE>(tag)?;
    write_f64s(w, &slots)
}

fn read_system<R: Read>(r: &mut R) -> Result<SystemParams> {
    let tag = r.read_u32::<LE>()?;
    let mut slots = [0.0; 8];
    r.read_f64_into::<LE>(&mut slots)?;
    SystemParams::from_slots(tag, &slots)
}

fn write_shape<W: Write>(w: &mut W, count: usize, dims: usize) -> Result<()> {
    w.write_u32::<LE>(count as u32)?;
    w.write_u32::<LE>(dims as u32)?;
    Ok(())
}

fn read_shape<R: Read>(r: &mut R) -> Result<(usize, usize)> {
    let count = r.read_u32::<LE>()? as usize;
    let dims = r.read_u32::<LE>()? as usize;
    if count == 0 || !(1..=3).contains(&dims) {
        return Err(Error::Format(format!("invalid shape N={count}, d={dims}")));
    }
    Ok((count, dims))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

/// Header: magic, version, N, d, sample count (u64), system tag and 8 parameter
/// slots, then the N particle masses. Body: positions, momenta and forces of
/// each sample. Velocities are recomputed on load; timesteps are not stored.
pub fn write_dataset<W: Write>(w: &mut W, data: &Dataset) -> Result<()> {
    write_header(w, DATASET_MAGIC)?;
    write_shape(w, data.count, data.dims)?;
    w.write_u64::<LE>(data.samples.len() as u64)?;
    write_system(w, &data.system)?;
    write_f64s(w, &data.masses)?;
    for s in &data.samples {
        write_f64s(w, s.state.positions())?;
        write_f64s(w, s.state.momenta())?;
        write_f64s(w, &s.force)?;
    }
    Ok(())
}

pub fn read_dataset<R: Read>(r: &mut R) -> Result<Dataset> {
    read_header(r, DATASET_MAGIC)?;
    let (count, dims) = read_shape(r)?;
    let n_samples = checked_len(r.read_u64::<LE>()?, "sample")?;
    let system = read_system(r)?;
    system.check_shape(count, dims)?;
    let masses = read_f64s(r, count)?;
    let n = count * dims;
    let mut samples = Vec::with_capacity(n_samples.min(1 << 20));
    for _ in 0..n_samples {
        let x = read_f64s(r, n)?;
        let p = read_f64s(r, n)?;
        let f = read_f64s(r, n)?;
        let state = PhaseState::new(x, p, masses.clone(), dims)?;
        samples.push(Sample::new(state, f, 0.0)?);
    }
    Ok(Dataset {
        system,
        count,
        dims,
        masses,
        samples,
    })
}

pub fn save_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = create(path)?;
    write_dataset(&mut w, data)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(&mut open(path)?)
}

/// One row per sample: positions, momenta, velocities, forces.
pub fn dataset_csv(data: &Dataset) -> String {
    let n = data.count * data.dims;
    let mut out = String::new();
    let cols: Vec<String> = ["x", "p", "v", "f"]
        .iter()
        .flat_map(|c| (0..n).map(move |k| format!("{c}{k}")))
        .collect();
    out.push_str(&cols.join(","));
    out.push('\n');
    for s in &data.samples {
        let row: Vec<String> = s
            .state
            .positions()
            .iter()
            .chain(s.state.momenta())
            .chain(&s.velocity)
            .chain(&s.force)
            .map(|v| v.to_string())
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn write_affine<W: Write>(w: &mut W, a: &Affine) -> Result<()> {
    w.write_f64::<LE>(a.shift)?;
    w.write_f64::<LE>(a.scale)?;
    Ok(())
}

fn read_affine<R: Read>(r: &mut R) -> Result<Affine> {
    Ok(Affine {
        shift: r.read_f64::<LE>()?,
        scale: r.read_f64::<LE>()?,
    })
}

/// Header: magic, version, architecture (width, Fourier feature count and
/// scale, activation code, four normalization affines), N, d, dt_max, step
/// and epoch counters. Body: parameter count and parameters, the frozen
/// Fourier frequencies, then an optional Adam state.
pub fn write_checkpoint<W: Write>(
    w: &mut W,
    state: &TrainState,
    with_optimizer: bool,
) -> Result<()> {
    let net = &state.net;
    let arch = net.arch();
    write_header(w, CHECKPOINT_MAGIC)?;
    w.write_u32::<LE>(arch.width as u32)?;
    w.write_u32::<LE>(arch.fourier_features as u32)?;
    w.write_f64::<LE>(arch.fourier_scale)?;
    w.write_u32::<LE>(arch.activation.code())?;
    let nm = &arch.normalization;
    for a in [&nm.position, &nm.momentum, &nm.velocity, &nm.force] {
        write_affine(w, a)?;
    }
    write_shape(
        w,
        crate::net::FlowField::count(net),
        crate::net::FlowField::dims(net),
    )?;
    w.write_f64::<LE>(crate::net::FlowField::dt_max(net))?;
    w.write_u64::<LE>(state.step as u64)?;
    w.write_u64::<LE>(state.epoch as u64)?;
    w.write_u64::<LE>(net.params().len() as u64)?;
    write_f64s(w, net.params())?;
    write_f64s(w, net.freqs())?;
    w.write_u8(with_optimizer as u8)?;
    if with_optimizer {
        w.write_u64::<LE>(state.adam.t)?;
        write_f64s(w, &state.adam.m)?;
        write_f64s(w, &state.adam.v)?;
    }
    Ok(())
}

/// Reads a checkpoint. A missing optimizer block yields a fresh Adam state.
pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<TrainState> {
    read_header(r, CHECKPOINT_MAGIC)?;
    let width = r.read_u32::<LE>()? as usize;
    let fourier_features = r.read_u32::<LE>()? as usize;
    let fourier_scale = r.read_f64::<LE>()?;
    let code = r.read_u32::<LE>()?;
    let activation = Activation::from_code(code)
        .ok_or_else(|| Error::Format(format!("unknown activation code {code}")))?;
    let normalization = Normalization {
        position: read_affine(r)?,
        momentum: read_affine(r)?,
        velocity: read_affine(r)?,
        force: read_affine(r)?,
    };
    let arch = ArchConfig {
        width,
        fourier_features,
        fourier_scale,
        activation,
        normalization,
    };
    let (count, dims) = read_shape(r)?;
    let dt_max = r.read_f64::<LE>()?;
    let step = r.read_u64::<LE>()? as usize;
    let epoch = r.read_u64::<LE>()? as usize;
    let n_params = checked_len(r.read_u64::<LE>()?, "parameter")?;
    let params = read_f64s(r, n_params)?;
    let freqs = read_f64s(r, checked_len(fourier_features as u64, "frequency")?)?;
    let net = FlowNet::from_parts(arch, count, dims, dt_max, freqs, params)?;
    let adam = match r.read_u8()? {
        0 => AdamState::new(n_params),
        1 => {
            let t = r.read_u64::<LE>()?;
            AdamState {
                m: read_f64s(r, n_params)?,
                v: read_f64s(r, n_params)?,
                t,
            }
        }
        other => return Err(Error::Format(format!("bad optimizer flag {other}"))),
    };
    Ok(TrainState {
        net,
        adam,
        step,
        epoch,
    })
}

pub fn save_checkpoint(path: &Path, state: &TrainState, with_optimizer: bool) -> Result<()> {
    let mut w = create(path)?;
    write_checkpoint(&mut w, state, with_optimizer)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    read_checkpoint(&mut open(path)?)
}

fn status_code(s: &RolloutStatus) -> (u32, u64) {
    match *s {
        RolloutStatus::Completed => (0, 0),
        RolloutStatus::LeftBox { step } => (1, step as u64),
        RolloutStatus::NonFinite { step } => (2, step as u64),
    }
}

fn status_from(code: u32, step: u64) -> Result<RolloutStatus> {
    let step = step as usize;
    match code {
        0 => Ok(RolloutStatus::Completed),
        1 => Ok(RolloutStatus::LeftBox { step }),
        2 => Ok(RolloutStatus::NonFinite { step }),
        _ => Err(Error::Format(format!("unknown rollout status {code}"))),
    }
}

/// Header as for datasets (N, d, state count, system, masses) plus dt, start
/// time, status and a flag for filter diagnostics. Body: positions and momenta
/// per state, then the diagnostics block (total and kinetic energy, angular
/// momentum, total momentum per state; filter records per step if flagged).
pub fn write_trajectory<W: Write>(
    w: &mut W,
    traj: &Trajectory,
    system: &SystemParams,
) -> Result<()> {
    let first = &traj.states[0];
    write_header(w, TRAJECTORY_MAGIC)?;
    write_shape(w, first.count(), first.dims())?;
    w.write_u64::<LE>(traj.states.len() as u64)?;
    write_system(w, system)?;
    write_f64s(w, first.masses())?;
    w.write_f64::<LE>(traj.dt)?;
    w.write_f64::<LE>(traj.start_time())?;
    let (code, step) = status_code(&traj.status);
    w.write_u32::<LE>(code)?;
    w.write_u64::<LE>(step)?;
    w.write_u8(!traj.filter_diagnostics.is_empty() as u8)?;
    for s in &traj.states {
        write_f64s(w, s.positions())?;
        write_f64s(w, s.momenta())?;
    }
    for d in &traj.diagnostics {
        w.write_f64::<LE>(d.total_energy)?;
        w.write_f64::<LE>(d.kinetic_energy)?;
        write_f64s(w, &d.angular_momentum)?;
        write_f64s(w, &d.momentum)?;
    }
    for f in &traj.filter_diagnostics {
        w.write_f64::<LE>(f.lambda)?;
        w.write_f64::<LE>(f.discriminant)?;
        w.write_u8(f.fallback.code())?;
        w.write_f64::<LE>(f.correction_norm)?;
    }
    Ok(())
}

pub fn read_trajectory<R: Read>(r: &mut R) -> Result<(Trajectory, SystemParams)> {
    read_header(r, TRAJECTORY_MAGIC)?;
    let (count, dims) = read_shape(r)?;
    let n_states = checked_len(r.read_u64::<LE>()?, "state")?;
    if n_states == 0 {
        return Err(Error::Format("trajectory without states".into()));
    }
    let system = read_system(r)?;
    let masses = read_f64s(r, count)?;
    let dt = r.read_f64::<LE>()?;
    let t0 = r.read_f64::<LE>()?;
    let code = r.read_u32::<LE>()?;
    let step = r.read_u64::<LE>()?;
    let status = status_from(code, step)?;
    let filtered = r.read_u8()? != 0;
    let n = count * dims;
    let mut states = Vec::with_capacity(n_states);
    for _ in 0..n_states {
        let x = read_f64s(r, n)?;
        let p = read_f64s(r, n)?;
        states.push(PhaseState::new(x, p, masses.clone(), dims)?);
    }
    let mut diagnostics = Vec::with_capacity(n_states);
    for _ in 0..n_states {
        let total_energy = r.read_f64::<LE>()?;
        let kinetic_energy = r.read_f64::<LE>()?;
        let l = read_f64s(r, 3)?;
        diagnostics.push(Diagnostics {
            total_energy,
            kinetic_energy,
            angular_momentum: [l[0], l[1], l[2]],
            momentum: read_f64s(r, dims)?,
        });
    }
    let mut filter_diagnostics = Vec::new();
    if filtered {
        for _ in 1..n_states {
            let lambda = r.read_f64::<LE>()?;
            let discriminant = r.read_f64::<LE>()?;
            let code = r.read_u8()?;
            let fallback = Fallback::from_code(code)
                .ok_or_else(|| Error::Format(format!("unknown fallback code {code}")))?;
            filter_diagnostics.push(FilterDiagnostics {
                lambda,
                discriminant,
                fallback,
                correction_norm: r.read_f64::<LE>()?,
            });
        }
    }
    let times = (0..n_states).map(|k| t0 + k as f64 * dt).collect();
    Ok((
        Trajectory {
            states,
            times,
            dt,
            diagnostics,
            filter_diagnostics,
            status,
        },
        system,
    ))
}

pub fn save_trajectory(path: &Path, traj: &Trajectory, system: &SystemParams) -> Result<()> {
    let mut w = create(path)?;
    write_trajectory(&mut w, traj, system)?;
    w.flush()?;
    Ok(())
}

pub fn load_trajectory(path: &Path) -> Result<(Trajectory, SystemParams)> {
    read_trajectory(&mut open(path)?)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// One row per state: `t, x.., p.., E_tot, E_kin, |L|, |P|, status`, plus
/// `lambda, discriminant, fallback` when filter diagnostics are present
/// (empty on the initial row). The status is `ok` except on the last row,
/// which carries the rollout status.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let n = traj.states[0].len();
    let filtered = !traj.filter_diagnostics.is_empty();
    let mut cols = vec!["t".to_string()];
    cols.extend((0..n).map(|k| format!("x{k}")));
    cols.extend((0..n).map(|k| format!("p{k}")));
    cols.extend(["E_tot", "E_kin", "L_norm", "P_norm", "status"].map(String::from));
    if filtered {
        cols.extend(["lambda", "discriminant", "fallback"].map(String::from));
    }
    let mut out = cols.join(",");
    out.push('\n');
    let last = traj.states.len() - 1;
    for (k, (s, d)) in traj.states.iter().zip(&traj.diagnostics).enumerate() {
        let mut row: Vec<String> = vec![traj.times[k].to_string()];
        row.extend(
            s.positions()
                .iter()
                .chain(s.momenta())
                .map(|v| v.to_string()),
        );
        row.push(d.total_energy.to_string());
        row.push(d.kinetic_energy.to_string());
        row.push(norm(&d.angular_momentum).to_string());
        row.push(norm(&d.momentum).to_string());
        row.push(if k == last { traj.status.label() } else { "ok" }.to_string());
        if filtered {
            match k
                .checked_sub(1)
                .and_then(|i| traj.filter_diagnostics.get(i))
            {
                Some(f) => {
                    row.push(f.lambda.to_string());
                    row.push(f.discriminant.to_string());
                    row.push(f.fallback.code().to_string());
                }
                None => row.extend(["", "", ""].map(String::from)),
            }
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Training log as CSV.
pub fn log_csv(rows: &[crate::train::LogRow]) -> String {
    let mut out = String::from(crate::train::LogRow::CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}
