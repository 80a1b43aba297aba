//! Run configuration: one JSON document drives every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classical::{validate_initial, OCConfig};
use crate::control::ControlSignal;
use crate::dynamics::EvolutionMode;
use crate::error::{Error, Result};
use crate::fields::{FieldSet, ScalarShape, VectorShape};
use crate::optimize::{OptimizerSettings, StepRule};
use crate::quantum::{Packet, QuantumSettings};
use crate::wigner::{envelope_violations, PhaseGrid};

/// Initial or fixed control for the simulate subcommands and optimizers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControlInit {
    Zero,
    /// One constant per control component.
    Constant { values: Vec<f64> },
    /// `amplitude sin(2 pi frequency t + phase)` on every component.
    Sine { amplitude: f64, frequency: f64, #[serde(default)] phase: f64 },
    /// Node-major values on the control grid.
    Nodes { values: Vec<f64> },
    /// Result of the classical optimizer started from zero.
    ClassicalOptimum,
}

impl ControlInit {
    fn validate(&self, cfg: &OCConfig, dim: usize, errs: &mut Vec<String>) {
        match self {
            ControlInit::Constant { values } if values.len() != dim => errs.push(format!(
                "control.values has {} entries but there are {dim} control profiles",
                values.len()
            )),
            ControlInit::Nodes { values } if values.len() != (cfg.intervals + 1) * dim => errs.push(format!(
                "control.values has {} entries; expected (intervals + 1) x controls = {}",
                values.len(),
                (cfg.intervals + 1) * dim
            )),
            ControlInit::Sine { amplitude, frequency, phase }
                if !(amplitude.is_finite() && frequency.is_finite() && phase.is_finite()) =>
            {
                errs.push("control sine parameters must be finite".into())
            }
            _ => {}
        }
    }

    /// Signal on the control grid; `None` for [`ControlInit::ClassicalOptimum`].
    pub fn signal(&self, cfg: &OCConfig, dim: usize) -> Option<ControlSignal> {
        let grid = cfg.grid();
        match self {
            ControlInit::Zero => Some(ControlSignal::zeros(grid, dim)),
            ControlInit::Constant { values } => Some(ControlSignal::from_fn(grid, dim, |_, i| values[i])),
            ControlInit::Sine {
                amplitude,
                frequency,
                phase,
            } => Some(ControlSignal::from_fn(grid, dim, |t, _| {
                amplitude * (2.0 * std::f64::consts::PI * frequency * t + phase).sin()
            })),
            ControlInit::Nodes { values } => Some(ControlSignal {
                grid,
                dim,
                values: values.clone(),
            }),
            ControlInit::ClassicalOptimum => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub hbars: Vec<f64>,
    /// Also run the sweep with the classical optimum held fixed.
    pub dynamics_only: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            hbars: vec![0.4, 0.2, 0.1, 0.05],
            dynamics_only: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub fields: FieldSet,
    pub oc: OCConfig,
    pub initial: Packet,
    /// `hbar` for `simulate-wigner` and `optimize-wigner`.
    pub hbar: f64,
    pub control: ControlInit,
    pub quantum: QuantumSettings,
    pub sweep: SweepConfig,
    pub classical_optimizer: OptimizerSettings,
    pub quantum_optimizer: OptimizerSettings,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            fields: FieldSet {
                potential: vec![
                    ScalarShape::Harmonic {
                        stiffness: 1.0,
                        center: [0.0; 3],
                    },
                    ScalarShape::Gaussian {
                        amplitude: 0.3,
                        center: [0.3, 0.0, 0.0],
                        width: 0.7,
                    },
                ],
                controls: vec![ScalarShape::Linear {
                    gradient: [-1.0, 0.0, 0.0],
                }],
                magnetic: vec![VectorShape::Uniform {
                    value: [0.0, 0.0, 0.5],
                }],
                rashba: vec![VectorShape::Cosine {
                    amplitude: [0.1, 0.4, 0.3],
                    wavevector: [0.6, 0.0, 0.0],
                    phase: 0.1,
                }],
            },
            oc: OCConfig::default(),
            initial: Packet::default(),
            hbar: 0.2,
            control: ControlInit::ClassicalOptimum,
            quantum: QuantumSettings::default(),
            sweep: SweepConfig::default(),
            classical_optimizer: OptimizerSettings {
                tolerance: 1e-10,
                ..OptimizerSettings::default()
            },
            quantum_optimizer: OptimizerSettings {
                max_iterations: 100,
                tolerance: 1e-6,
                min_relative_decrease: 1e-13,
                step_rule: StepRule::Sobolev,
                ..OptimizerSettings::default()
            },
            seed: 0,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// Every violated constraint, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut e = Vec::new();
        e.extend(self.fields.validate());
        e.extend(self.oc.validate());
        e.extend(validate_initial(&self.initial.classical()).into_iter().map(|m| format!("initial: {m}")));
        if !(self.initial.sigma > 0.0) {
            e.push(format!("initial.sigma must be positive (got {})", self.initial.sigma));
        }
        if !(self.hbar > 0.0) {
            e.push(format!("hbar must be positive (got {})", self.hbar));
        }
        if self.sweep.hbars.is_empty() {
            e.push("sweep.hbars must not be empty".into());
        }
        for h in &self.sweep.hbars {
            if !(*h > 0.0) {
                e.push(format!("sweep.hbars entries must be positive (got {h})"));
            }
        }
        for (name, o) in [
            ("classical_optimizer", &self.classical_optimizer),
            ("quantum_optimizer", &self.quantum_optimizer),
        ] {
            e.extend(o.validate().into_iter().map(|m| format!("{name}: {m}")));
        }
        self.control.validate(&self.oc, self.fields.control_dim(), &mut e);
        e.extend(self.quantum_violations(&self.all_hbars()));
        e
    }

    fn all_hbars(&self) -> Vec<f64> {
        let mut h = vec![self.hbar];
        h.extend(&self.sweep.hbars);
        h.retain(|v| *v > 0.0);
        h
    }

    /// Grid, cut-off and time-step constraints that do not need a trajectory.
    fn quantum_violations(&self, hbars: &[f64]) -> Vec<String> {
        let q = &self.quantum;
        let mut e = Vec::new();
        for (name, n) in [("quantum.grid.nx", q.grid.nx), ("quantum.grid.np", q.grid.np)] {
            if n < 4 || !n.is_power_of_two() {
                e.push(format!("{name} must be a power of two >= 4 (got {n})"));
            }
        }
        if !(q.grid.margin >= 0.0) {
            e.push("quantum.grid.margin must be nonnegative".into());
        }
        for (name, v) in [("quantum.grid.x_half", q.grid.x_half), ("quantum.grid.p_half", q.grid.p_half)] {
            if let Some(v) = v {
                if !(v > 0.0) {
                    e.push(format!("{name} must be positive (got {v})"));
                }
            }
        }
        for (name, v) in [("quantum.cutoff.radius", q.cutoff.radius), ("quantum.cutoff.ramp", q.cutoff.ramp)] {
            if let Some(v) = v {
                if !(v > 0.0) {
                    e.push(format!("{name} must be positive (got {v})"));
                }
            }
        }
        if !(q.cutoff.tube_sigmas > 0.0) {
            e.push("quantum.cutoff.tube_sigmas must be positive".into());
        }
        if q.substeps == Some(0) {
            e.push("quantum.substeps must be at least 1".into());
        }
        if let Some(b) = q.u_bound {
            if !(b > 0.0) {
                e.push(format!("quantum.u_bound must be positive (got {b})"));
            }
        }
        if q.mode == EvolutionMode::UniformField && !self.fields.spin_fields_uniform() {
            e.push("quantum.mode uniform_field requires constant magnetic and rashba fields".into());
        }
        if !e.is_empty() {
            return e;
        }
        // With an explicit box the packet envelope and the cut-off support can
        // be checked now; derived boxes satisfy both by construction.
        if let (Some(xh), Some(ph)) = (q.grid.x_half, q.grid.p_half) {
            if let Ok(grid) = PhaseGrid::centered(q.grid.nx, q.grid.np, xh, ph) {
                for &h in hbars {
                    for m in envelope_violations(&grid, h, self.initial.sigma, self.initial.x, self.initial.p) {
                        e.push(format!("hbar = {h}: {m}"));
                    }
                }
                if let (Some(r), ramp) = (q.cutoff.radius, q.cutoff.ramp) {
                    let reach = r + ramp.unwrap_or(r);
                    if reach > xh.min(ph) {
                        e.push(format!(
                            "cut-off support radius {reach} exceeds the box half-width {}; suggested quantum.grid.x_half and p_half >= {}",
                            xh.min(ph),
                            reach + 1.0
                        ));
                    }
                }
            }
            if let (Some(s), Some(b)) = (q.substeps, q.u_bound) {
                if let Ok(grid) = PhaseGrid::centered(q.grid.nx, q.grid.np, xh, ph) {
                    let lim = crate::dynamics::cfl_limit(&grid, &self.fields, self.oc.mass, &vec![b; self.fields.control_dim()]);
                    let dt = self.oc.horizon / (self.oc.intervals as f64 * s as f64);
                    if dt > lim {
                        e.push(format!(
                            "time step {dt:.4e} violates the CFL bound {lim:.4e}; suggested quantum.substeps >= {}",
                            (self.oc.horizon / (self.oc.intervals as f64 * lim)).ceil()
                        ));
                    }
                }
            }
        }
        e
    }
}

/// Parse and validate; reports every violation at once.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        Error::Config(vec![format!(
            "parse error at line {}, column {} (field `{}`): {}",
            inner.line(),
            inner.column(),
            path,
            inner
        )])
    })?;
    let v = cfg.violations();
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}
