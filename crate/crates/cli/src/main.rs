use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hfm_cli::{commands, CliError, JobConfig};

type Job = fn(&JobConfig) -> Result<serde_json::Value, CliError>;

/// Hamiltonian flow-map jobs: generate data, train, simulate, evaluate.
#[derive(Parser)]
#[command(name = "hfm", version, arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a trajectory-free dataset on an energy shell.
    Gen(Common),
    /// Train a flow map on a dataset (or resume from a checkpoint).
    Train(Common),
    /// Roll out Velocity Verlet or a trained flow map.
    Simulate(Common),
    /// Compare trajectory files and write metrics.
    Eval(Common),
}

#[derive(Args)]
struct Common {
    /// Job file (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides the job seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the worker count used by gen and simulate.
    #[arg(long)]
    workers: Option<usize>,
    /// Sets any job key, e.g. `--set train.optimizer.lr_max=3e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<JobConfig, CliError> {
        let mut cfg = JobConfig::load(&self.config, &self.set)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(w) = self.workers {
            if w == 0 {
                return Err(CliError::Config("--workers must be at least 1".into()));
            }
            cfg.workers = w;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<serde_json::Value, CliError> {
    let (name, common, job): (&str, &Common, Job) = match &cli.command {
        Command::Gen(c) => ("gen", c, commands::gen),
        Command::Train(c) => ("train", c, commands::train_cmd),
        Command::Simulate(c) => ("simulate", c, commands::simulate),
        Command::Eval(c) => ("eval", c, commands::eval),
    };
    let cfg = common.load()?;
    std::fs::create_dir_all(&cfg.out).map_err(|e| CliError::io(&cfg.out, e))?;
    let resolved = cfg.out.join(format!("{name}_job.toml"));
    std::fs::write(&resolved, cfg.to_toml()?).map_err(|e| CliError::io(&resolved, e))?;
    job(&cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&summary).expect("summary serializes")
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
