//! Command-line front end: argument parsing and the six subcommands, each
//! writing its artifacts through one [`ArtifactWriter`].

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::classical::{self, ClassicalProblem, ClassicalTrajectory, OCConfig};
use crate::config::{load_config, ControlInit, RunConfig};
use crate::control::ControlSignal;
use crate::dynamics::Diagnostics;
use crate::error::{Error, Result};
use crate::io::{fingerprint, two_column, ArtifactWriter};
use crate::optimize::{optimize, IterationRecord, OptimizationResult};
use crate::quantum::{self, QuantumProblem, SweepInputs, SweepRow};
use crate::wigner::{moments, WignerState};

#[derive(Debug, Parser)]
#[command(name = "spinoc", version, about = "Classical and Wigner optimal control of spin particles")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated hbar values (overrides `sweep.hbars`; a single value
    /// also overrides `hbar`).
    #[arg(long, value_delimiter = ',')]
    pub hbar_list: Option<Vec<f64>>,
    /// RNG seed for the oracle suite (overrides `seed`)
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Classical trajectory for the configured control.
    SimulateClassical(CommonArgs),
    /// Classical optimal control.
    OptimizeClassical(CommonArgs),
    /// Wigner evolution for the configured control.
    SimulateWigner(CommonArgs),
    /// Quantum optimal control at the configured hbar.
    OptimizeWigner(CommonArgs),
    /// Quantum optimal control over a list of hbar values.
    LimitSweep(CommonArgs),
    /// Oracle suite; exits non-zero if any check fails.
    Validate(CommonArgs),
}

impl Command {
    pub fn args(&self) -> &CommonArgs {
        match self {
            Command::SimulateClassical(a)
            | Command::OptimizeClassical(a)
            | Command::SimulateWigner(a)
            | Command::OptimizeWigner(a)
            | Command::LimitSweep(a)
            | Command::Validate(a) => a,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Command::SimulateClassical(_) => "simulate-classical",
            Command::OptimizeClassical(_) => "optimize-classical",
            Command::SimulateWigner(_) => "simulate-wigner",
            Command::OptimizeWigner(_) => "optimize-wigner",
            Command::LimitSweep(_) => "limit-sweep",
            Command::Validate(_) => "validate",
        }
    }

    /// Module reported alongside errors.
    pub fn module(&self) -> &'static str {
        match self {
            Command::SimulateClassical(_) | Command::OptimizeClassical(_) => "classical_ocp",
            Command::SimulateWigner(_) => "wigner_dynamics",
            Command::OptimizeWigner(_) | Command::LimitSweep(_) => "quantum_ocp",
            Command::Validate(_) => "oracles",
        }
    }
}

#[derive(Debug)]
pub struct Outcome {
    pub out_dir: PathBuf,
    pub fingerprint: String,
    /// False only when `validate` found a failing check or a sweep is partial.
    pub passed: bool,
}

/// Failure of one subcommand, tagged with the module and config fingerprint.
#[derive(Debug)]
pub struct RunError {
    pub module: &'static str,
    pub fingerprint: Option<String>,
    pub error: Error,
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.fingerprint {
            Some(fp) => write!(f, "[{}] (config {}) {}", self.module, fp, self.error),
            None => write!(f, "[cli_io] {}", self.error),
        }
    }
}

/// Loads the config, applies command-line overrides and re-validates.
pub fn resolve_config(args: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(hs) = &args.hbar_list {
        if hs.is_empty() {
            return Err(Error::config("--hbar-list is empty"));
        }
        cfg.sweep.hbars = hs.clone();
        if let [h] = hs.as_slice() {
            cfg.hbar = *h;
        }
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    let v = cfg.violations();
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    Ok(cfg)
}

pub fn run(cmd: &Command) -> std::result::Result<Outcome, RunError> {
    let cfg = resolve_config(cmd.args()).map_err(|error| RunError {
        module: "cli_io",
        fingerprint: None,
        error,
    })?;
    // The output location does not change any result, so it stays out of the fingerprint.
    let keyed = RunConfig {
        output_dir: PathBuf::new(),
        ..cfg.clone()
    };
    let fp = fingerprint(&keyed).map_err(|error| RunError {
        module: "cli_io",
        fingerprint: None,
        error,
    })?;
    execute(cmd, &cfg, &fp).map_err(|error| RunError {
        module: cmd.module(),
        fingerprint: Some(fp.clone()),
        error,
    })
}

/// Runs `cmd` with an already resolved config.
pub fn execute(cmd: &Command, cfg: &RunConfig, fp: &str) -> Result<Outcome> {
    let out_dir = cfg.output_dir.clone();
    let mut w = ArtifactWriter::new(&out_dir)?;
    w.write_json("config.json", cfg)?;
    let passed = match cmd {
        Command::SimulateClassical(_) => simulate_classical(cfg, fp, &mut w)?,
        Command::OptimizeClassical(_) => optimize_classical(cfg, fp, &mut w)?,
        Command::SimulateWigner(_) => simulate_wigner(cfg, fp, &mut w)?,
        Command::OptimizeWigner(_) => optimize_wigner(cfg, fp, &mut w)?,
        Command::LimitSweep(_) => limit_sweep(cfg, fp, &mut w)?,
        Command::Validate(_) => validate(cfg, fp, &mut w)?,
    };
    w.finish(fp, cmd.name())?;
    Ok(Outcome {
        out_dir,
        fingerprint: fp.to_string(),
        passed,
    })
}

fn classical_optimum(cfg: &RunConfig) -> Result<(OptimizationResult, ClassicalTrajectory)> {
    quantum::classical_reference(&cfg.fields, &cfg.oc, &cfg.initial, &cfg.classical_optimizer)
}

/// Configured control; the classical optimum when so requested.
fn configured_control(cfg: &RunConfig) -> Result<ControlSignal> {
    match cfg.control.signal(&cfg.oc, cfg.fields.control_dim()) {
        Some(u) => Ok(u),
        None => Ok(classical_optimum(cfg)?.0.control),
    }
}

fn control_rows(u: &ControlSignal) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut header = vec!["t".to_string()];
    header.extend((1..=u.dim).map(|i| format!("u{i}")));
    let rows = (0..u.grid.nodes())
        .map(|k| {
            let mut r = vec![u.grid.time(k)];
            r.extend_from_slice(u.node(k));
            r
        })
        .collect();
    (header, rows)
}

fn write_control(w: &mut ArtifactWriter, rel: &str, u: &ControlSignal) -> Result<()> {
    let (header, rows) = control_rows(u);
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    w.write_csv(rel, &h, &rows)?;
    Ok(())
}

const TRAJECTORY_HEADER: [&str; 10] = ["t", "x1", "x2", "x3", "p1", "p2", "p3", "d1", "d2", "d3"];

fn write_trajectory(w: &mut ArtifactWriter, traj: &ClassicalTrajectory) -> Result<()> {
    let rows: Vec<Vec<f64>> = traj
        .nodes()
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let mut r = vec![traj.grid.time(k)];
            r.extend(s.x.iter().chain(s.p.iter()).chain(s.d.iter()));
            r
        })
        .collect();
    w.write_csv("trajectory.csv", &TRAJECTORY_HEADER, &rows)?;
    let t: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    for (col, name) in [(1, "x1"), (4, "p1"), (7, "d1"), (8, "d2"), (9, "d3")] {
        let y: Vec<f64> = rows.iter().map(|r| r[col]).collect();
        w.write_bytes(&format!("plots/{name}.dat"), two_column(&t, &y).as_bytes())?;
    }
    Ok(())
}

const HISTORY_HEADER: [&str; 8] = [
    "iteration",
    "objective",
    "goal",
    "cost",
    "gradient_norm",
    "gradient_inf",
    "step",
    "backtracks",
];

fn write_history(w: &mut ArtifactWriter, rel: &str, history: &[IterationRecord]) -> Result<()> {
    let rows: Vec<Vec<f64>> = history
        .iter()
        .map(|r| {
            vec![
                r.iteration as f64,
                r.objective,
                r.goal,
                r.cost,
                r.gradient_norm,
                r.gradient_inf,
                r.step,
                r.backtracks as f64,
            ]
        })
        .collect();
    w.write_csv(rel, &HISTORY_HEADER, &rows)?;
    Ok(())
}

fn write_diagnostics(w: &mut ArtifactWriter, diags: &[Diagnostics]) -> Result<()> {
    let rows: Vec<Vec<f64>> = diags.iter().map(Diagnostics::row).collect();
    w.write_csv("diagnostics.csv", Diagnostics::header(), &rows)?;
    let t: Vec<f64> = diags.iter().map(|d| d.time).collect();
    for (name, f) in [
        ("mean_x", (|d: &Diagnostics| d.mean_x) as fn(&Diagnostics) -> f64),
        ("mean_p", |d| d.mean_p),
        ("d3", |d| d.spin[2]),
        ("l2", |d| d.l2),
    ] {
        let y: Vec<f64> = diags.iter().map(f).collect();
        w.write_bytes(&format!("plots/{name}.dat"), two_column(&t, &y).as_bytes())?;
    }
    Ok(())
}

fn write_snapshot(w: &mut ArtifactWriter, rel: &str, f: &WignerState) -> Result<()> {
    let mut bytes = Vec::new();
    f.write_binary(&mut bytes)?;
    w.write_bytes(rel, &bytes)?;
    Ok(())
}

fn simulate_classical(cfg: &RunConfig, fp: &str, w: &mut ArtifactWriter) -> Result<bool> {
    let u = configured_control(cfg)?;
    let traj = classical::integrate_forward(&cfg.fields, &cfg.initial.classical(), &u, &cfg.oc)?;
    write_trajectory(w, &traj)?;
    write_control(w, "control.csv", &u)?;
    let fin = traj.final_state();
    let goal = classical::goal_value(&fin, &cfg.oc);
    let cost = classical::cost_value(&u, &cfg.oc);
    w.write_json(
        "summary.json",
        &json!({
            "command": "simulate-classical",
            "config_fingerprint": fp,
            "goal": goal,
            "cost": cost,
            "objective": goal + cost,
            "final_state": fin,
        }),
    )?;
    Ok(true)
}

fn optimize_classical(cfg: &RunConfig, fp: &str, w: &mut ArtifactWriter) -> Result<bool> {
    let init = cfg.initial.classical();
    let u0 = match &cfg.control {
        ControlInit::ClassicalOptimum => ControlSignal::zeros(cfg.oc.grid(), cfg.fields.control_dim()),
        c => c.signal(&cfg.oc, cfg.fields.control_dim()).unwrap(),
    };
    let mut prob = ClassicalProblem {
        fields: &cfg.fields,
        init: init.clone(),
        cfg: &cfg.oc,
    };
    let res = optimize(&mut prob, &u0, &cfg.classical_optimizer)?;
    let start = crate::optimize::ControlObjective::evaluate(&mut prob, &u0)?;
    let traj = classical::integrate_forward(&cfg.fields, &init, &res.control, &cfg.oc)?;
    write_trajectory(w, &traj)?;
    write_control(w, "control.csv", &res.control)?;
    write_history(w, "history.csv", &res.history)?;
    let it: Vec<f64> = res.history.iter().map(|r| r.iteration as f64).collect();
    let obj: Vec<f64> = res.history.iter().map(|r| r.objective).collect();
    w.write_bytes("plots/objective.dat", two_column(&it, &obj).as_bytes())?;
    w.write_json(
        "summary.json",
        &json!({
            "command": "optimize-classical",
            "config_fingerprint": fp,
            "converged": res.converged,
            "stagnated": res.stagnated,
            "iterations": res.history.len().saturating_sub(1),
            "objective": res.evaluation.total(),
            "goal": res.evaluation.goal,
            "cost": res.evaluation.cost,
            "initial_objective": start.total(),
            "initial_goal": start.goal,
            "gradient_norm": res.gradient_norm,
            "final_state": traj.final_state(),
        }),
    )?;
    Ok(true)
}

fn quantum_problem<'a>(cfg: &'a RunConfig, oc: &'a OCConfig, u: &ControlSignal) -> Result<(QuantumProblem<'a>, ClassicalTrajectory)> {
    let traj = classical::integrate_forward(&cfg.fields, &cfg.initial.classical(), u, oc)?;
    let prob = QuantumProblem::setup(oc, &cfg.fields, &cfg.initial, cfg.hbar, &cfg.quantum, u, &traj)?;
    Ok((prob, traj))
}

fn grid_summary(prob: &QuantumProblem<'_>) -> serde_json::Value {
    let g = prob.grid();
    json!({
        "nx": g.nx,
        "np": g.np,
        "x_min": g.x_min,
        "x_len": g.x_len,
        "p_min": g.p_min,
        "p_len": g.p_len,
        "cutoff_radius": prob.target.radius,
        "cutoff_ramp": prob.target.ramp,
        "substeps": prob.substeps,
        "u_bound": prob.u_bound,
    })
}

fn terminal_comparison(f: &WignerState, traj: &ClassicalTrajectory) -> Result<serde_json::Value> {
    let m = moments(f)?;
    let c = traj.final_state();
    let dd: f64 = (0..3).map(|i| (m.spin[i] - c.d[i]).powi(2)).sum::<f64>().sqrt();
    Ok(json!({
        "mean_x": m.mean_x,
        "mean_p": m.mean_p,
        "spin": m.spin,
        "classical_final_state": c,
        "err_x": (m.mean_x - c.x[0]).abs(),
        "err_p": (m.mean_p - c.p[0]).abs(),
        "err_d": dd,
    }))
}

fn simulate_wigner(cfg: &RunConfig, fp: &str, w: &mut ArtifactWriter) -> Result<bool> {
    let u = configured_control(cfg)?;
    let (mut prob, traj) = quantum_problem(cfg, &cfg.oc, &u)?;
    let run = prob.run(&u, cfg.quantum.sample_every)?;
    write_diagnostics(w, &run.diagnostics)?;
    write_control(w, "control.csv", &u)?;
    write_snapshot(w, "snapshots/initial.bin", &prob.f0)?;
    write_snapshot(w, "snapshots/final.bin", &run.final_state)?;
    let cost = classical::cost_value(&u, &cfg.oc);
    w.write_json(
        "summary.json",
        &json!({
            "command": "simulate-wigner",
            "config_fingerprint": fp,
            "hbar": cfg.hbar,
            "goal": run.goal,
            "cost": cost,
            "objective": run.goal + cost,
            "grid": grid_summary(&prob),
            "terminal": terminal_comparison(&run.final_state, &traj)?,
        }),
    )?;
    Ok(true)
}

fn optimize_wigner(cfg: &RunConfig, fp: &str, w: &mut ArtifactWriter) -> Result<bool> {
    let (cres, ctraj) = classical_optimum(cfg)?;
    let u0 = cfg
        .control
        .signal(&cfg.oc, cfg.fields.control_dim())
        .unwrap_or_else(|| cres.control.clone());
    let (mut prob, _) = quantum_problem(cfg, &cfg.oc, &u0)?;
    let start = crate::optimize::ControlObjective::evaluate(&mut prob, &u0)?;
    let res = quantum::optimize_quantum(&mut prob, &u0, &cfg.quantum_optimizer)?;
    let run = prob.run(&res.control, cfg.quantum.sample_every)?;
    write_diagnostics(w, &run.diagnostics)?;
    write_control(w, "control.csv", &res.control)?;
    write_control(w, "classical_control.csv", &cres.control)?;
    write_history(w, "history.csv", &res.history)?;
    write_snapshot(w, "snapshots/final.bin", &run.final_state)?;
    let it: Vec<f64> = res.history.iter().map(|r| r.iteration as f64).collect();
    let obj: Vec<f64> = res.history.iter().map(|r| r.objective).collect();
    w.write_bytes("plots/objective.dat", two_column(&it, &obj).as_bytes())?;
    w.write_json(
        "summary.json",
        &json!({
            "command": "optimize-wigner",
            "config_fingerprint": fp,
            "hbar": cfg.hbar,
            "converged": res.converged,
            "stagnated": res.stagnated,
            "iterations": res.history.len().saturating_sub(1),
            "objective": res.evaluation.total(),
            "goal": res.evaluation.goal,
            "cost": res.evaluation.cost,
            "initial_objective": start.total(),
            "initial_goal": start.goal,
            "classical_objective": cres.evaluation.total(),
            "u_dist_to_classical": res.control.sub(&cres.control).l2_norm(),
            "forward_runs": prob.forward_runs,
            "adjoint_runs": prob.adjoint_runs,
            "grid": grid_summary(&prob),
            "terminal": terminal_comparison(&run.final_state, &ctraj)?,
        }),
    )?;
    Ok(true)
}

fn hbar_tag(h: f64) -> String {
    format!("hbar_{h}")
}

fn limit_sweep(cfg: &RunConfig, fp: &str, w: &mut ArtifactWriter) -> Result<bool> {
    let inp = SweepInputs {
        fields: &cfg.fields,
        cfg: &cfg.oc,
        packet: &cfg.initial,
        quantum: &cfg.quantum,
        classical_optimizer: &cfg.classical_optimizer,
        quantum_optimizer: &cfg.quantum_optimizer,
    };
    let table = quantum::hbar_sweep(&inp, &cfg.sweep.hbars)?;
    w.write_csv("sweep.csv", &SweepRow::HEADER, &table.rows())?;
    write_control(w, "classical_control.csv", &table.classical_control)?;
    for m in &table.members {
        let tag = hbar_tag(m.row.hbar);
        write_control(w, &format!("controls/{tag}.csv"), &m.control)?;
        write_history(w, &format!("histories/{tag}.csv"), &m.history)?;
    }
    let hs: Vec<f64> = table.members.iter().map(|m| m.row.hbar).collect();
    for (name, col) in [("u_dist", 4), ("err_x", 5), ("err_p", 6), ("err_d", 7)] {
        let y: Vec<f64> = table.members.iter().map(|m| m.row.row()[col]).collect();
        w.write_bytes(&format!("plots/{name}_vs_hbar.dat"), two_column(&hs, &y).as_bytes())?;
    }
    let dynamics = if cfg.sweep.dynamics_only {
        let rows = quantum::dynamics_sweep(
            &cfg.fields,
            &cfg.oc,
            &cfg.initial,
            &cfg.quantum,
            &table.classical_control,
            &cfg.sweep.hbars,
        )?;
        let data: Vec<Vec<f64>> = rows.iter().map(|r| r.row()).collect();
        w.write_csv("dynamics_sweep.csv", &quantum::DynamicsRow::HEADER, &data)?;
        Some(rows)
    } else {
        None
    };
    w.write_json(
        "summary.json",
        &json!({
            "command": "limit-sweep",
            "config_fingerprint": fp,
            "classical_objective": table.classical_objective,
            "partial": table.is_partial(),
            "failed": table.failed,
            "rows": table.members.iter().map(|m| &m.row).collect::<Vec<_>>(),
            "dynamics_only": dynamics,
        }),
    )?;
    Ok(!table.is_partial())
}

#[cfg(feature = "oracles")]
fn validate(cfg: &RunConfig, fp: &str, w: &mut ArtifactWriter) -> Result<bool> {
    let report = crate::oracles::run_suite(cfg);
    w.write_json(
        "report.json",
        &json!({
            "command": "validate",
            "config_fingerprint": fp,
            "passed": report.passed,
            "seed": report.seed,
            "checks": report.checks,
        }),
    )?;
    Ok(report.passed)
}

#[cfg(not(feature = "oracles"))]
fn validate(_: &RunConfig, _: &str, _: &mut ArtifactWriter) -> Result<bool> {
    Err(Error::Unsupported("built without the `oracles` feature".into()))
}

/// Reads the manifest written by a previous run.
pub fn read_manifest(dir: &Path) -> Result<serde_json::Value> {
    Ok(serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_the_documented_command_line() {
        let cli = Cli::try_parse_from([
            "spinoc",
            "limit-sweep",
            "--config",
            "c.json",
            "--out",
            "o",
            "--hbar-list",
            "0.4,0.2",
            "--seed",
            "7",
        ])
        .unwrap();
        let a = cli.command.args();
        assert_eq!(cli.command.name(), "limit-sweep");
        assert_eq!(a.hbar_list.as_deref(), Some(&[0.4, 0.2][..]));
        assert_eq!(a.seed, Some(7));
        assert_eq!(a.out.as_deref(), Some(Path::new("o")));
        assert!(Cli::try_parse_from(["spinoc", "simulate-wigner"]).is_err());
        assert!(Cli::try_parse_from(["spinoc", "bogus", "--config", "c"]).is_err());
    }

    #[test]
    fn single_hbar_overrides_hbar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, "{}").unwrap();
        let args = CommonArgs {
            config: path,
            out: Some(dir.path().join("o")),
            hbar_list: Some(vec![0.3]),
            seed: Some(9),
        };
        let cfg = resolve_config(&args).unwrap();
        assert_eq!(cfg.hbar, 0.3);
        assert_eq!(cfg.sweep.hbars, vec![0.3]);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.output_dir, dir.path().join("o"));
    }

    #[test]
    fn errors_carry_module_and_fingerprint() {
        let e = RunError {
            module: "quantum_ocp",
            fingerprint: Some("abc".into()),
            error: Error::Degenerate("x".into()),
        };
        assert_eq!(e.to_string(), "[quantum_ocp] (config abc) degenerate problem: x");
    }
}
