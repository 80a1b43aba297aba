use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use spinoc::cli::{run, Command, CommonArgs};
use spinoc::io::sha256_hex;
use spinoc::wigner::{moments, WignerState};

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, text).unwrap();
    p
}

fn args(config: PathBuf, out: PathBuf) -> CommonArgs {
    CommonArgs {
        config,
        out: Some(out),
        hbar_list: None,
        seed: None,
    }
}

fn manifest_paths(dir: &Path) -> Vec<(String, String)> {
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    m["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| (a["path"].as_str().unwrap().to_string(), a["sha256"].as_str().unwrap().to_string()))
        .collect()
}

/// Small quantum problem that runs in seconds.
const SMALL: &str = r#"{
  "oc": { "horizon": 0.3, "intervals": 8 },
  "quantum": { "grid": { "nx": 64, "np": 64 } },
  "quantum_optimizer": { "max_iterations": 3, "tolerance": 1e-4 },
  "hbar": 0.4,
  "sweep": { "hbars": [0.3, 0.4], "dynamics_only": true }
}"#;

#[test]
fn simulate_classical_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "{}");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let fa = run(&Command::SimulateClassical(args(cfg.clone(), a.clone()))).unwrap().fingerprint;
    let fb = run(&Command::SimulateClassical(args(cfg, b.clone()))).unwrap().fingerprint;
    assert_eq!(fa, fb);
    // config.json records the output directory, which differs between the runs.
    let strip = |m: Vec<(String, String)>| m.into_iter().filter(|(p, _)| p != "config.json").collect::<Vec<_>>();
    let (ma, mb) = (strip(manifest_paths(&a)), strip(manifest_paths(&b)));
    assert_eq!(ma, mb);
    assert!(ma.iter().any(|(p, _)| p == "summary.json"));
    for (rel, _) in &ma {
        assert_eq!(fs::read(a.join(rel)).unwrap(), fs::read(b.join(rel)).unwrap(), "{rel}");
    }
}

#[test]
fn manifest_checksums_match_files_and_csvs_have_headers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{ "control": { "kind": "sine", "amplitude": 0.5, "frequency": 1.0 } }"#);
    let out = dir.path().join("o");
    let outcome = run(&Command::OptimizeClassical(args(cfg, out.clone()))).unwrap();
    let paths = manifest_paths(&out);
    assert!(paths.iter().any(|p| p.0 == "history.csv"));
    for (rel, sum) in &paths {
        let bytes = fs::read(out.join(rel)).unwrap();
        assert_eq!(&sha256_hex(&bytes), sum, "{rel}");
        if rel.ends_with(".csv") {
            let text = String::from_utf8(bytes.clone()).unwrap();
            let mut lines = text.lines();
            let header = lines.next().unwrap();
            assert!(header.chars().next().unwrap().is_ascii_alphabetic(), "{rel}: {header}");
            let row = lines.next().unwrap();
            let first = row.split(',').nth(1).unwrap();
            let mantissa = first.split('e').next().unwrap().replace(['-', '.'], "");
            assert_eq!(mantissa.len(), 17, "{rel}: {first}");
        }
        if rel.ends_with(".dat") {
            let text = String::from_utf8(bytes.clone()).unwrap();
            assert!(text.lines().all(|l| l.split_whitespace().count() == 2));
        }
    }
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config_fingerprint"], outcome.fingerprint.as_str());
    assert!(summary["objective"].as_f64().unwrap() < summary["initial_objective"].as_f64().unwrap());
}

#[test]
fn simulate_wigner_snapshot_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("o");
    run(&Command::SimulateWigner(args(cfg, out.clone()))).unwrap();
    let f = WignerState::read_binary(fs::File::open(out.join("snapshots/final.bin")).unwrap()).unwrap();
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let m = moments(&f).unwrap();
    assert_eq!(m.mean_x, summary["terminal"]["mean_x"].as_f64().unwrap());
    assert_eq!(f.hbar, 0.4);
    assert_eq!(f.grid.nx, 64);
    let diag = fs::read_to_string(out.join("diagnostics.csv")).unwrap();
    assert!(diag.starts_with("time,mass,l2,h1p,mean_x,mean_p,d1,d2,d3,var_x,var_p\n"));
}

#[test]
fn limit_sweep_emits_one_row_per_hbar() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("o");
    let mut a = args(cfg, out.clone());
    a.hbar_list = Some(vec![0.4, 0.35, 0.3]);
    let outcome = run(&Command::LimitSweep(a)).unwrap();
    assert!(outcome.passed);
    let text = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "hbar,J_star,goal,cost,u_dist_to_classical,err_x,err_p,err_d,var_x_T,var_p_T"
    );
    let hs: Vec<f64> = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(hs, vec![0.4, 0.35, 0.3]);
    assert_eq!(fs::read_to_string(out.join("dynamics_sweep.csv")).unwrap().lines().count(), 4);
    for h in ["0.4", "0.35", "0.3"] {
        assert!(out.join(format!("controls/hbar_{h}.csv")).exists());
    }
}

#[test]
fn validate_reports_all_checks_passing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "{}");
    let out = dir.path().join("o");
    let outcome = run(&Command::Validate(args(cfg, out.clone()))).unwrap();
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true, "{report:#}");
    assert!(outcome.passed);
    assert!(report["checks"].as_array().unwrap().len() >= 10);
}

#[test]
fn binary_reports_config_errors_with_exit_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{ "quantum": { "grid": { "nx": 100 } }, "hbar": -1 }"#);
    let out = Process::new(env!("CARGO_BIN_EXE_spinoc"))
        .args(["simulate-wigner", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("nx"), "{err}");
    assert!(err.contains("hbar"), "{err}");
}

#[test]
fn binary_reports_module_and_fingerprint_on_failure() {
    let dir = tempfile::tempdir().unwrap();
    // Passes load-time checks; the cut-off radius is only checked against the
    // classical trajectory once the problem is set up.
    let cfg = write_config(
        dir.path(),
        r#"{ "control": { "kind": "zero" }, "quantum": { "grid": { "nx": 64, "np": 64 }, "cutoff": { "radius": 0.5 } }, "hbar": 0.4 }"#,
    );
    let out = Process::new(env!("CARGO_BIN_EXE_spinoc"))
        .args(["simulate-wigner", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("[wigner_dynamics] (config "), "{err}");
    assert!(err.contains("suggested cutoff.radius"), "{err}");
}

#[test]
fn binary_runs_simulate_classical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{ "control": { "kind": "constant", "values": [0.5] } }"#);
    let o = dir.path().join("o");
    let out = Process::new(env!("CARGO_BIN_EXE_spinoc"))
        .args(["simulate-classical", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&o)
        .args(["--seed", "3"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let used: serde_json::Value = serde_json::from_str(&fs::read_to_string(o.join("config.json")).unwrap()).unwrap();
    assert_eq!(used["seed"], 3);
    assert!(o.join("trajectory.csv").exists() && o.join("plots/x1.dat").exists());
}
