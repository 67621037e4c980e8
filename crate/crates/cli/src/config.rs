//! Job file format.
//!
//! A job is one TOML document. Top-level keys `seed`, `out` and `workers`
//! are shared by every subcommand; `[system]` is required; each subcommand
//! reads its own section (`[gen]`, `[train]`, `[simulate]`, `[eval]`).
//! Relative paths inside the file resolve against the file's directory.
//! `--set a.b.c=value` overrides any key, with `value` parsed as a TOML
//! literal and falling back to a plain string.

use std::path::{Path, PathBuf};

use hfm_core::filters::FilterSpec;
use hfm_core::loss::LossConfig;
use hfm_core::net::{Activation, ArchConfig};
use hfm_core::sampling::{
    Evolve, FixedEnergy, MomentumMode, PositionBox, TimestepDist, TimestepKind,
};
use hfm_core::train::TrainConfig;
use hfm_core::SystemParams;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "one")]
    pub workers: usize,
    pub system: SystemParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gen: Option<GenSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSection>,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSection {
    pub samples: usize,
    pub e_tot: f64,
    #[serde(default = "one")]
    pub count: usize,
    /// Defaults to the system's fixed dimension, or 3 for gravity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<usize>,
    /// Defaults to the per-system box.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<PositionBox>,
    #[serde(default = "default_max_tries")]
    pub max_tries: usize,
    #[serde(default)]
    pub zero_total_momentum: bool,
    #[serde(default = "fixed_energy")]
    pub momenta: MomentumMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evolve: Option<Evolve>,
    /// Also write the dataset as CSV.
    #[serde(default)]
    pub csv: bool,
}

fn default_max_tries() -> usize {
    1_000_000
}

fn fixed_energy() -> MomentumMode {
    MomentumMode::FixedEnergy
}

impl GenSection {
    pub fn dims(&self, sys: &SystemParams) -> usize {
        self.dims.or(sys.fixed_dims()).unwrap_or(3)
    }

    pub fn shell(&self, sys: &SystemParams) -> FixedEnergy {
        let dims = self.dims(sys);
        FixedEnergy {
            e_tot: self.e_tot,
            bounds: self
                .bounds
                .clone()
                .unwrap_or_else(|| PositionBox::default_for(sys, dims)),
            count: self.count,
            max_tries: self.max_tries,
            zero_total_momentum: self.zero_total_momentum,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSection {
    #[serde(default = "default_width")]
    pub width: usize,
    /// Defaults to `width`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fourier_features: Option<usize>,
    #[serde(default = "unit")]
    pub fourier_scale: f64,
    #[serde(default = "gelu")]
    pub activation: Activation,
    /// Fit input/output affine maps to the dataset statistics.
    #[serde(default = "yes")]
    pub normalize: bool,
}

fn default_width() -> usize {
    256
}

fn unit() -> f64 {
    1.0
}

fn gelu() -> Activation {
    Activation::Gelu
}

impl Default for ArchSection {
    fn default() -> Self {
        Self {
            width: default_width(),
            fourier_features: None,
            fourier_scale: 1.0,
            activation: Activation::Gelu,
            normalize: true,
        }
    }
}

impl ArchSection {
    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            width: self.width,
            fourier_features: self.fourier_features.unwrap_or(self.width),
            fourier_scale: self.fourier_scale,
            activation: self.activation,
            normalization: Default::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimestepSection {
    #[serde(default = "TimestepKind::mixture_default")]
    pub kind: TimestepKind,
    #[serde(default = "default_q_zero")]
    pub q_zero: f64,
}

fn default_q_zero() -> f64 {
    0.75
}

impl Default for TimestepSection {
    fn default() -> Self {
        Self {
            kind: TimestepKind::mixture_default(),
            q_zero: default_q_zero(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub dataset: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resume: Option<PathBuf>,
    pub dt_max: f64,
    #[serde(default)]
    pub arch: ArchSection,
    #[serde(default)]
    pub timestep: TimestepSection,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub optimizer: TrainConfig,
    /// Store Adam moments in the checkpoint so training can resume.
    #[serde(default = "yes")]
    pub save_optimizer: bool,
}

impl TrainSection {
    pub fn timestep_dist(&self) -> TimestepDist {
        TimestepDist {
            kind: self.timestep.kind,
            dt_max: self.dt_max,
            q_zero: self.timestep.q_zero,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepperKind {
    Vv,
    Hfm,
}

/// Where initial states come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSource {
    /// Rows of a dataset file.
    Dataset { path: PathBuf, indices: Vec<usize> },
    /// Fresh draws from the `[gen]` energy shell.
    Shell { trajectories: usize },
    /// One explicit state; masses default to the system's.
    State {
        positions: Vec<f64>,
        momenta: Vec<f64>,
        dims: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        masses: Option<Vec<f64>>,
    },
}

/// Fine Velocity Verlet run applied to every initial state before the
/// simulation proper, e.g. to start a bridge at a later time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Warmup {
    pub dt: f64,
    pub n_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub stepper: StepperKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub dt: f64,
    pub n_steps: usize,
    #[serde(default)]
    pub filters: Vec<FilterSpec>,
    pub initial: InitialSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup: Option<Warmup>,
    #[serde(default)]
    pub t0: f64,
    #[serde(default = "default_bound")]
    pub sanity_bound: f64,
    #[serde(default = "yes")]
    pub csv: bool,
}

fn default_bound() -> f64 {
    1e3
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    TrajectoryMse,
    FinalPositionMse,
    NormalizedRmsd,
    HrMae,
    ConservationDrift,
}

impl MetricKind {
    pub const ALL: [MetricKind; 5] = [
        MetricKind::TrajectoryMse,
        MetricKind::FinalPositionMse,
        MetricKind::NormalizedRmsd,
        MetricKind::HrMae,
        MetricKind::ConservationDrift,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pair {
    pub pred: PathBuf,
    pub reference: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub pairs: Vec<Pair>,
    /// Unset means every metric that applies to the trajectories at hand.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Vec<MetricKind>>,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_max: Option<f64>,
}

fn default_bins() -> usize {
    hfm_core::eval::DEFAULT_BINS
}

impl JobConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        Self::parse_with(text, &[])
    }

    /// Parses `text` after applying `key=value` overrides.
    pub fn parse_with(text: &str, overrides: &[String]) -> CliResult<Self> {
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))
    }

    /// Reads a job file; relative paths are resolved against its directory.
    pub fn load(path: &Path, overrides: &[String]) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::parse_with(&text, overrides)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out);
        if let Some(t) = &mut self.train {
            fix(&mut t.dataset);
            if let Some(r) = &mut t.resume {
                fix(r);
            }
        }
        if let Some(s) = &mut self.simulate {
            if let Some(c) = &mut s.checkpoint {
                fix(c);
            }
            if let InitialSource::Dataset { path, .. } = &mut s.initial {
                fix(path);
            }
        }
        if let Some(e) = &mut self.eval {
            for p in &mut e.pairs {
                fix(&mut p.pred);
                fix(&mut p.reference);
            }
        }
    }

    pub fn gen_section(&self) -> CliResult<&GenSection> {
        self.gen.as_ref().ok_or_else(|| missing("gen"))
    }

    pub fn train_section(&self) -> CliResult<&TrainSection> {
        self.train.as_ref().ok_or_else(|| missing("train"))
    }

    pub fn simulate_section(&self) -> CliResult<&SimulateSection> {
        self.simulate.as_ref().ok_or_else(|| missing("simulate"))
    }

    pub fn eval_section(&self) -> CliResult<&EvalSection> {
        self.eval.as_ref().ok_or_else(|| missing("eval"))
    }
}

fn missing(section: &str) -> CliError {
    CliError::Config(format!("job file has no [{section}] section"))
}

/// Sets `a.b.c = value` in `doc`, creating intermediate tables.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> CliResult<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| {
        CliError::Config(format!("override `{spec}` is not of the form key=value"))
    })?;
    let value = parse_literal(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key `{key}`")));
    }
    let (last, parents) = parts.split_last().expect("nonempty");
    let mut table = doc;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
