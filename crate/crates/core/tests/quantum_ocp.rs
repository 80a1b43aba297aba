use spinoc::classical::{self, ClassicalProblem, OCConfig};
use spinoc::config::RunConfig;
use spinoc::control::ControlSignal;
use spinoc::optimize::{ControlObjective, OptimizerSettings};
use spinoc::quantum::{self, GridPolicy, QuantumProblem, QuantumSettings, SweepInputs};

fn small() -> (RunConfig, QuantumSettings) {
    let mut cfg = RunConfig::default();
    cfg.oc = OCConfig {
        horizon: 0.3,
        intervals: 8,
        ..cfg.oc
    };
    let settings = QuantumSettings {
        grid: GridPolicy {
            nx: 64,
            np: 64,
            ..Default::default()
        },
        ..Default::default()
    };
    (cfg, settings)
}

#[test]
fn degenerate_targets_keep_every_control_at_zero() {
    let (mut cfg, settings) = small();
    cfg.oc.nu_x = 0.0;
    cfg.oc.nu_p = 0.0;
    cfg.oc.nu_d = 0.0;
    let opt = OptimizerSettings {
        max_iterations: 5,
        ..Default::default()
    };
    let inp = SweepInputs {
        fields: &cfg.fields,
        cfg: &cfg.oc,
        packet: &cfg.initial,
        quantum: &settings,
        classical_optimizer: &opt,
        quantum_optimizer: &opt,
    };
    let table = quantum::hbar_sweep(&inp, &[0.4, 0.3]).unwrap();
    assert!(!table.is_partial(), "{:?}", table.failed);
    assert_eq!(table.classical_control.max_abs(), 0.0);
    assert_eq!(table.members.len(), 2);
    for m in &table.members {
        assert_eq!(m.control.max_abs(), 0.0);
        assert_eq!(m.row.u_dist_to_classical, 0.0);
        assert_eq!(m.row.goal, 0.0);
    }
}

#[test]
fn quantum_goal_gradient_approaches_the_classical_one() {
    let (cfg, settings) = small();
    let u = ControlSignal::from_fn(cfg.oc.grid(), cfg.fields.control_dim(), |t, _| 0.6 + 0.5 * (5.0 * t).sin());
    let init = cfg.initial.classical();
    let traj = classical::integrate_forward(&cfg.fields, &init, &u, &cfg.oc).unwrap();
    let (_, gc) = ClassicalProblem {
        fields: &cfg.fields,
        init,
        cfg: &cfg.oc,
    }
    .goal_gradient(&u)
    .unwrap();
    let mut diffs = Vec::new();
    for hbar in [0.4, 0.3, 0.2] {
        let mut prob = QuantumProblem::setup(&cfg.oc, &cfg.fields, &cfg.initial, hbar, &settings, &u, &traj).unwrap();
        let (_, gq) = prob.goal_gradient(&u).unwrap();
        diffs.push(gq.sub(&gc).max_abs() / gc.max_abs());
    }
    assert!(diffs[0] > diffs[1] && diffs[1] > diffs[2], "{diffs:?}");
    assert!(diffs[2] < 0.2, "{diffs:?}");
}

#[test]
fn quantum_optimizer_history_is_monotone_and_improves_the_goal() {
    let (cfg, settings) = small();
    let zero = ControlSignal::zeros(cfg.oc.grid(), cfg.fields.control_dim());
    let (cl, traj) = quantum::classical_reference(&cfg.fields, &cfg.oc, &cfg.initial, &cfg.classical_optimizer).unwrap();
    let mut prob = QuantumProblem::setup(&cfg.oc, &cfg.fields, &cfg.initial, 0.4, &settings, &cl.control, &traj).unwrap();
    let start = prob.evaluate(&zero).unwrap();
    let opt = OptimizerSettings {
        max_iterations: 8,
        ..cfg.quantum_optimizer.clone()
    };
    let res = quantum::optimize_quantum(&mut prob, &zero, &opt).unwrap();
    assert!(res.history.windows(2).all(|w| w[1].objective <= w[0].objective));
    assert!(res.evaluation.total() < start.total());
    assert!(res.evaluation.goal < start.goal);
}
