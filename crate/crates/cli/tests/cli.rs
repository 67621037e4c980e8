use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hfm_core::io;
use hfm_core::SystemParams;
use serde_json::Value;

fn hfm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hfm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn job(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn run_ok(cmd: &str, cfg: &Path, extra: &[&str]) -> Value {
    let mut args = vec![cmd, "--config", cfg.to_str().unwrap()];
    args.extend_from_slice(extra);
    let out = hfm(&args);
    assert!(
        out.status.success(),
        "{cmd} failed: {}\n{}",
        String::from_utf8_lossy(&out.stderr),
        String::from_utf8_lossy(&out.stdout)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn code(cmd: &str, cfg: &Path, extra: &[&str]) -> i32 {
    let mut args = vec![cmd, "--config", cfg.to_str().unwrap()];
    args.extend_from_slice(extra);
    hfm(&args).status.code().unwrap()
}

const OSCILLATOR: &str = r#"
seed = 3
[system]
kind = "harmonic_oscillator"
omega = 1.0

[gen]
samples = 1000
e_tot = 0.5

[train]
dataset = "out/dataset.hfmd"
dt_max = 2.5
arch = { width = 16 }
optimizer = { batch_size = 50, epochs = 2, lr_max = 1e-3 }

[simulate]
stepper = "vv"
checkpoint = "out/checkpoint.hfmc"
dt = 0.01
n_steps = 200
initial = { kind = "state", positions = [1.0], momenta = [0.0], dims = 1 }

[eval]
pairs = [{ pred = "out/traj_0000.hfmt", reference = "out/traj_0000.hfmt", label = "self" }]
"#;

#[test]
fn no_arguments_prints_usage() {
    let out = hfm(&[]);
    assert_eq!(out.status.code(), Some(2));
    let text = String::from_utf8_lossy(&out.stderr);
    assert!(text.contains("Usage"), "{text}");
}

#[test]
fn gen_is_reproducible_and_reports_closure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = job(dir.path(), "job.toml", OSCILLATOR);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_ok("gen", &cfg, &["--out", a.to_str().unwrap()]);
    run_ok(
        "gen",
        &cfg,
        &["--out", b.to_str().unwrap(), "--workers", "3"],
    );
    for f in ["dataset.hfmd", "gen_report.json"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }

    let barbanis = r#"
[system]
kind = "barbanis"
omega_x = 1.0
omega_y = 1.0
lambda = 10.0
[gen]
samples = 500
e_tot = 1.5
"#;
    let cfg = job(dir.path(), "barbanis.toml", barbanis);
    let report = run_ok("gen", &cfg, &[]);
    assert!(report["max_energy_error"].as_f64().unwrap() <= 1e-10);

    let gravity = r#"
[system]
kind = "gravity"
g = 1.0
softening = 0.05
[gen]
samples = 300
e_tot = -1.0
count = 4
zero_total_momentum = true
"#;
    let cfg = job(dir.path(), "gravity.toml", gravity);
    let report = run_ok(
        "gen",
        &cfg,
        &["--out", dir.path().join("g").to_str().unwrap()],
    );
    assert_eq!(report["non_finite_forces"], 0);
    let data = io::load_dataset(&dir.path().join("g/dataset.hfmd")).unwrap();
    assert!(data
        .samples
        .iter()
        .all(|s| s.force.iter().all(|f| f.is_finite())));
}

#[test]
fn train_runs_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = job(dir.path(), "job.toml", OSCILLATOR);
    run_ok("gen", &cfg, &[]);
    let t0 = std::time::Instant::now();
    let first = run_ok("train", &cfg, &[]);
    assert!(t0.elapsed().as_secs() < 60);
    assert_eq!(first["step"], 40);
    let log = std::fs::read_to_string(dir.path().join("out/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 41);

    let resumed = run_ok(
        "train",
        &cfg,
        &[
            "--set",
            "train.resume=\"out/checkpoint.hfmc\"",
            "--set",
            "train.optimizer.epochs=3",
        ],
    );
    assert_eq!(resumed["start_step"], 40);
    assert_eq!(resumed["step"], 60);
}

#[test]
fn simulate_vv_matches_the_exact_oscillator() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = job(dir.path(), "job.toml", OSCILLATOR);
    let summary = run_ok("simulate", &cfg, &[]);
    assert_eq!(summary["trajectories"][0]["status"], "completed");
    let (traj, sys) = io::load_trajectory(&dir.path().join("out/traj_0000.hfmt")).unwrap();
    assert_eq!(sys, SystemParams::HarmonicOscillator { omega: 1.0 });
    let exact = sys.exact_flow(&traj.states[0], 2.0).unwrap();
    assert!((traj.last().positions()[0] - exact.positions()[0]).abs() < 1e-4);
    assert!(dir.path().join("out/traj_0000.csv").is_file());
}

#[test]
fn hfm_stepper_checks_dt_and_is_still_at_zero_dt() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = job(dir.path(), "job.toml", OSCILLATOR);
    run_ok("gen", &cfg, &[]);
    run_ok("train", &cfg, &[]);
    assert_eq!(
        code(
            "simulate",
            &cfg,
            &[
                "--set",
                "simulate.stepper=\"hfm\"",
                "--set",
                "simulate.dt=3.0"
            ]
        ),
        2
    );

    run_ok(
        "simulate",
        &cfg,
        &[
            "--set",
            "simulate.stepper=\"hfm\"",
            "--set",
            "simulate.dt=0.0",
            "--set",
            "simulate.n_steps=5",
        ],
    );
    let (traj, _) = io::load_trajectory(&dir.path().join("out/traj_0000.hfmt")).unwrap();
    assert!(traj.states.iter().all(|s| s == &traj.states[0]));
}

const GRAVITY_SIM: &str = r#"
seed = 1
[system]
kind = "gravity"
g = 1.0
softening = 0.1

[gen]
samples = 10
e_tot = -2.0
count = 4
zero_total_momentum = true

[simulate]
stepper = "vv"
dt = 0.01
n_steps = 20
initial = { kind = "shell", trajectories = 2 }
"#;

#[test]
fn filters_add_diagnostic_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = job(dir.path(), "job.toml", GRAVITY_SIM);
    let plain = dir.path().join("plain");
    let filtered = dir.path().join("filtered");
    run_ok("simulate", &cfg, &["--out", plain.to_str().unwrap()]);
    run_ok(
        "simulate",
        &cfg,
        &[
            "--out",
            filtered.to_str().unwrap(),
            "--set",
            "simulate.filters=[{kind=\"remove_drift\"},{kind=\"coupled_conservation\"}]",
        ],
    );
    let header = |d: &Path| {
        std::fs::read_to_string(d.join("traj_0000.csv"))
            .unwrap()
            .lines()
            .next()
            .unwrap()
            .to_string()
    };
    assert_ne!(header(&plain), header(&filtered));
    assert!(header(&filtered).contains("lambda"));
    assert!(!header(&plain).contains("lambda"));
}

#[test]
fn eval_self_comparison_is_zero_and_orders_timesteps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = job(dir.path(), "job.toml", OSCILLATOR);
    let fine = dir.path().join("fine");
    let coarse = dir.path().join("coarse");
    let half = dir.path().join("half");
    run_ok(
        "simulate",
        &cfg,
        &[
            "--out",
            fine.to_str().unwrap(),
            "--set",
            "simulate.dt=0.001",
            "--set",
            "simulate.n_steps=4000",
        ],
    );
    run_ok(
        "simulate",
        &cfg,
        &[
            "--out",
            coarse.to_str().unwrap(),
            "--set",
            "simulate.dt=0.2",
            "--set",
            "simulate.n_steps=20",
        ],
    );
    run_ok(
        "simulate",
        &cfg,
        &[
            "--out",
            half.to_str().unwrap(),
            "--set",
            "simulate.dt=0.1",
            "--set",
            "simulate.n_steps=40",
        ],
    );
    let eval = r#"
[system]
kind = "harmonic_oscillator"
omega = 1.0
[eval]
pairs = [
  { pred = "fine/traj_0000.hfmt", reference = "fine/traj_0000.hfmt", label = "self" },
  { pred = "coarse/traj_0000.hfmt", reference = "fine/traj_0000.hfmt", label = "coarse" },
  { pred = "half/traj_0000.hfmt", reference = "fine/traj_0000.hfmt", label = "half" },
]
"#;
    let cfg = job(dir.path(), "eval.toml", eval);
    let report = run_ok("eval", &cfg, &[]);
    let metric = |i: usize, name: &str| report["pairs"][i]["metrics"][name].as_f64().unwrap();
    for name in [
        "trajectory_mse",
        "final_position_mse",
        "normalized_rmsd_position",
        "normalized_rmsd_momentum",
    ] {
        assert_eq!(metric(0, name), 0.0, "{name}");
    }
    assert!(report["pairs"][0]["metrics"].get("hr_mae").is_none());
    // asked for explicitly, h(r) on a single particle is an error
    assert_ne!(
        code("eval", &cfg, &["--set", "eval.metrics=[\"hr_mae\"]"]),
        0
    );
    assert!(metric(2, "trajectory_mse") < metric(1, "trajectory_mse"));
    assert!(metric(2, "final_position_mse") < metric(1, "final_position_mse"));

    let csv = std::fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "pair,metric,system,dt,n_steps,seed,value"
    );
    for line in lines {
        assert_eq!(line.split(',').count(), 7, "{line}");
    }
}

#[test]
fn eval_rejects_mismatched_systems() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = job(dir.path(), "job.toml", OSCILLATOR);
    run_ok(
        "simulate",
        &cfg,
        &["--out", dir.path().join("a").to_str().unwrap()],
    );
    run_ok(
        "simulate",
        &cfg,
        &[
            "--out",
            dir.path().join("b").to_str().unwrap(),
            "--set",
            "system.omega=2.0",
        ],
    );
    let eval = r#"
[system]
kind = "harmonic_oscillator"
omega = 1.0
[eval]
pairs = [{ pred = "a/traj_0000.hfmt", reference = "b/traj_0000.hfmt" }]
"#;
    let cfg = job(dir.path(), "eval.toml", eval);
    assert_eq!(code("eval", &cfg, &[]), 2);
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = job(dir.path(), "job.toml", OSCILLATOR);
    // config error
    assert_eq!(code("gen", &cfg, &["--set", "gen.samples=\"many\""]), 2);
    let broken = job(dir.path(), "broken.toml", "[system\n");
    assert_eq!(code("gen", &broken, &[]), 2);
    // missing input
    assert_eq!(code("train", &cfg, &[]), 4);
    assert_eq!(code("gen", &dir.path().join("absent.toml"), &[]), 4);
    // numeric abort
    run_ok("gen", &cfg, &[]);
    assert_eq!(
        code(
            "train",
            &cfg,
            &[
                "--set",
                "train.optimizer.lr_max=1e300",
                "--set",
                "train.optimizer.lr_warm_start=1e300",
                "--set",
                "train.optimizer.clip_norm=1e300"
            ]
        ),
        3
    );
    let report: Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("out/train_report.json")).unwrap(),
    )
    .unwrap();
    assert!(report["aborted"].is_string());
}

#[test]
fn pipeline_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"
seed = 9
[system]
kind = "gravity"
g = 1.0
softening = 0.1

[gen]
samples = 512
e_tot = -2.0
count = 4
zero_total_momentum = true

[train]
dataset = "dataset.hfmd"
dt_max = 0.1
arch = { width = 16 }
optimizer = { batch_size = 16, epochs = 7, max_steps = 200, lr_max = 1e-3 }

[simulate]
stepper = "hfm"
checkpoint = "checkpoint.hfmc"
dt = 0.05
n_steps = 100
filters = [{ kind = "random_rotation" }, { kind = "remove_drift" }, { kind = "coupled_conservation" }]
initial = { kind = "shell", trajectories = 2 }
"#;
    let mut outputs = Vec::new();
    for run in ["r1", "r2"] {
        let d = dir.path().join(run);
        std::fs::create_dir_all(&d).unwrap();
        let cfg = job(&d, "job.toml", text);
        let out = d.to_str().unwrap();
        run_ok("gen", &cfg, &["--out", out]);
        let t = run_ok("train", &cfg, &["--out", out]);
        assert_eq!(t["step"], 200);
        run_ok(
            "simulate",
            &cfg,
            &[
                "--out",
                out,
                "--workers",
                if run == "r1" { "1" } else { "2" },
            ],
        );
        outputs.push(d);
    }
    for f in [
        "dataset.hfmd",
        "checkpoint.hfmc",
        "train_log.csv",
        "traj_0000.hfmt",
        "traj_0001.hfmt",
        "traj_0000.csv",
        "simulate_report.json",
        "train_report.json",
    ] {
        let a = std::fs::read(outputs[0].join(f)).unwrap();
        let b = std::fs::read(outputs[1].join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
}
