//! Quantum optimal control on the Wigner system: target symbol and cut-off,
//! backward adjoint, control gradient, optimization and the `hbar` sweeps.
//!
//! The goal is `Phi(f) = tr int f_T f(T)`, which for the normalization
//! `2 int f0 = 1` reduces to the classical goal on point masses. Its gradient
//! density with respect to `u_i(t)` is `2 <h, Theta-_{phi_i}[f]>`, where `h`
//! solves the Wigner system backward from `h(T) = chi_R f_T`.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::classical::{self, ClassicalProblem, ClassicalState, ClassicalTrajectory, OCConfig};
use crate::control::ControlSignal;
use crate::dynamics::{cfl_limit, Diagnostics, EvolutionMode, Generator, Stepper};
use crate::error::{Error, Result};
use crate::fields::{FieldSet, Vec3};
use crate::optimize::{optimize, ControlObjective, Evaluation, IterationRecord, OptimizerSettings};
use crate::wigner::{coherent_widths, coherent_wigner, inner_product, moments, PhaseGrid, WignerState};

type Comps = [Vec<f64>; 4];

/// `1` for `s <= 0`, `0` for `s >= 1`, C-infinity in between.
pub fn smooth_step(s: f64) -> f64 {
    let psi = |t: f64| if t > 0.0 { (-1.0 / t).exp() } else { 0.0 };
    if s <= 0.0 {
        1.0
    } else if s >= 1.0 {
        0.0
    } else {
        let a = psi(1.0 - s);
        a / (a + psi(s))
    }
}

/// Radial cut-off: `1` for `r <= R`, `0` for `r >= R + ramp`.
pub fn cutoff(x: f64, p: f64, radius: f64, ramp: f64) -> f64 {
    smooth_step(((x * x + p * p).sqrt() - radius) / ramp)
}

/// Pauli components `(f_T0, f_T1, f_T2, f_T3)` of the target symbol at `(x, p)`.
pub fn target_value(cfg: &OCConfig, x: f64, p: f64) -> [f64; 4] {
    let xt = cfg.x_target();
    let pt = cfg.p_target();
    let transverse = 0.5 * cfg.nu_x * (xt[1] * xt[1] + xt[2] * xt[2]) + 0.5 * cfg.nu_p * (pt[1] * pt[1] + pt[2] * pt[2]);
    let d = cfg.d_target();
    [
        0.5 * cfg.nu_x * (x - xt[0]).powi(2) + 0.5 * cfg.nu_p * (p - pt[0]).powi(2) + transverse,
        -cfg.nu_d * d[0],
        -cfg.nu_d * d[1],
        -cfg.nu_d * d[2],
    ]
}

#[derive(Clone, Debug)]
pub struct TargetSymbol {
    pub radius: f64,
    pub ramp: f64,
    /// `f_T` on the grid.
    pub raw: WignerState,
    /// `chi_R f_T` on the grid.
    pub cut: WignerState,
}

pub fn build_target(grid: &PhaseGrid, hbar: f64, cfg: &OCConfig, radius: f64, ramp: f64) -> Result<TargetSymbol> {
    let mut errs = grid.validate();
    if !(radius > 0.0) {
        errs.push(format!("cutoff.radius must be positive (got {radius})"));
    }
    if !(ramp > 0.0) {
        errs.push(format!("cutoff.ramp must be positive (got {ramp})"));
    }
    if errs.is_empty() {
        let reach = radius + ramp;
        let room = (-grid.x_min).min(grid.x_max()).min(-grid.p_min).min(grid.p_max());
        if reach > room {
            errs.push(format!(
                "cut-off support radius {reach:.4} leaves the box (largest inscribed radius {room:.4}); suggested box half-widths >= {:.4}",
                reach + grid.dx().max(grid.dp())
            ));
        }
    }
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let mut raw = WignerState::zeros(grid, hbar);
    let mut cut = WignerState::zeros(grid, hbar);
    for i in 0..grid.nx {
        let x = grid.x(i);
        for j in 0..grid.np {
            let p = grid.p(j);
            let v = target_value(cfg, x, p);
            let chi = cutoff(x, p, radius, ramp);
            for c in 0..4 {
                raw.comps[c][i * grid.np + j] = v[c];
                cut.comps[c][i * grid.np + j] = chi * v[c];
            }
        }
    }
    Ok(TargetSymbol { radius, ramp, raw, cut })
}

/// `Phi(f) = tr int f_T f = 2 <f_T, f>`.
pub fn goal_value(target: &TargetSymbol, f: &WignerState) -> Result<f64> {
    Ok(2.0 * inner_product(&target.raw, f)?)
}

/// The same goal from the moments of `f`.
pub fn goal_from_moments(cfg: &OCConfig, f: &WignerState) -> Result<f64> {
    let m = moments(f)?;
    let xt = cfg.x_target();
    let pt = cfg.p_target();
    let d = cfg.d_target();
    let scalar = 0.5 * cfg.nu_x * (m.var_x + (m.mean_x - xt[0]).powi(2) + xt[1] * xt[1] + xt[2] * xt[2])
        + 0.5 * cfg.nu_p * (m.var_p + (m.mean_p - pt[0]).powi(2) + pt[1] * pt[1] + pt[2] * pt[2]);
    let spin = -cfg.nu_d * (d[0] * m.spin[0] + d[1] * m.spin[1] + d[2] * m.spin[2]);
    Ok(m.mass * (scalar + spin))
}

/// Largest phase-space radius `sqrt(x^2 + p^2)` along a classical trajectory.
pub fn trajectory_radius(traj: &ClassicalTrajectory, per_interval: usize) -> f64 {
    let grid = traj.grid;
    let n = grid.intervals * per_interval.max(1);
    (0..=n)
        .map(|k| {
            let s = traj.at(grid.horizon * k as f64 / n as f64);
            (s.x[0] * s.x[0] + s.p[0] * s.p[0]).sqrt()
        })
        .fold(0.0, f64::max)
}

/// Trajectory radius plus `sigmas` packet widths.
pub fn tube_radius(traj: &ClassicalTrajectory, hbar: f64, sigma: f64, sigmas: f64) -> f64 {
    let (sx, sp) = coherent_widths(hbar, sigma);
    trajectory_radius(traj, 8) + sigmas * sx.max(sp)
}

/// A priori radius from `|p|^2 <= p0^2 + 4 m max|U|` with `max|U|` taken over
/// `|x| <= x_reach` for the potential including controls bounded by `u_max`.
pub fn energy_radius(fields: &FieldSet, mass: f64, x0: f64, p0: f64, x_reach: f64, u_max: f64) -> f64 {
    let n = 2001;
    let mut umax: f64 = 0.0;
    for k in 0..n {
        let s = -x_reach + 2.0 * x_reach * k as f64 / (n - 1) as f64;
        let mut v = fields.potential_line(s).abs();
        for i in 0..fields.control_dim() {
            v += u_max * fields.control_line(i, s).abs();
        }
        umax = umax.max(v);
    }
    let p = (p0 * p0 + 4.0 * mass * umax).sqrt();
    (x_reach.max(x0.abs()).powi(2) + p * p).sqrt()
}

/// Error with a suggested radius when the tube does not fit inside `radius`.
pub fn check_radius(tube: f64, radius: f64) -> Result<()> {
    if tube > radius {
        return Err(Error::Config(vec![format!(
            "cutoff.radius {radius:.4} is smaller than the trajectory tube radius {tube:.4}; suggested cutoff.radius >= {:.4}",
            tube.ceil()
        )]));
    }
    Ok(())
}

/// `1/2 tr int Theta-_{dU/du_i}[h] f`.
pub fn control_gradient_integral(gen: &mut Generator, h: &WignerState, f: &WignerState, i: usize) -> Result<f64> {
    h.check_same_grid(f)?;
    if !h.grid.same_as(&gen.grid) {
        return Err(Error::GridMismatch("adjoint state and generator grids differ".into()));
    }
    if i >= gen.control_dim() {
        return Err(Error::Dimension {
            what: "control index",
            expected: gen.control_dim(),
            got: i,
        });
    }
    let mut th = WignerState::zeros(&h.grid, h.hbar);
    theta_control(gen, i, &h.comps, &mut th.comps);
    inner_product(&th, f)
}

fn theta_control(gen: &mut Generator, i: usize, src: &Comps, dst: &mut Comps) {
    let table = gen.control_table(i).clone();
    let sp = gen.spectral();
    let [d0, d1, d2, d3] = dst;
    table.apply(sp, &src[0], Some(&src[1]), d0, Some(d1));
    table.apply(sp, &src[2], Some(&src[3]), d2, Some(d3));
}

fn dot(a: &Comps, b: &Comps, cell: f64) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x.iter().zip(y).map(|(u, v)| u * v).sum::<f64>();
    }
    s * cell
}

/// Estimate of the largest `|lambda|` of the generator at constant control
/// `u`, by power iteration on `-L^2`.
pub fn spectral_radius(gen: &mut Generator, u: &[f64], iterations: usize, seed: u64) -> f64 {
    let n = gen.grid.len();
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let mut v: Comps = std::array::from_fn(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect());
    let mut w: Comps = std::array::from_fn(|_| vec![0.0; n]);
    let mut rho: f64 = 0.0;
    for _ in 0..iterations {
        let nv = dot(&v, &v, 1.0).sqrt();
        v.iter_mut().flatten().for_each(|a| *a /= nv);
        gen.apply(&v, u, &mut w);
        rho = rho.max(dot(&w, &w, 1.0).sqrt());
        gen.apply(&w, u, &mut v);
    }
    rho
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridPolicy {
    pub nx: usize,
    pub np: usize,
    /// Half-width of the x box; derived from the cut-off support when absent.
    pub x_half: Option<f64>,
    pub p_half: Option<f64>,
    /// Extra room beyond the cut-off support for derived boxes.
    pub margin: f64,
}

impl Default for GridPolicy {
    fn default() -> Self {
        GridPolicy {
            nx: 128,
            np: 128,
            x_half: None,
            p_half: None,
            margin: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CutoffPolicy {
    /// Plateau radius; trajectory radius plus `tube_sigmas` packet widths when absent.
    pub radius: Option<f64>,
    /// Width of the transition band; defaults to `radius / 2`.
    pub ramp: Option<f64>,
    pub tube_sigmas: f64,
}

impl Default for CutoffPolicy {
    fn default() -> Self {
        CutoffPolicy {
            radius: None,
            ramp: None,
            tube_sigmas: 7.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Packet {
    pub x: f64,
    pub p: f64,
    pub d: [f64; 3],
    pub sigma: f64,
}

impl Default for Packet {
    fn default() -> Self {
        Packet {
            x: -1.0,
            p: 0.0,
            d: [1.0, 0.0, 0.0],
            sigma: 1.0,
        }
    }
}

impl Packet {
    pub fn classical(&self) -> ClassicalState {
        ClassicalState {
            x: Vec3::new(self.x, 0.0, 0.0),
            p: Vec3::new(self.p, 0.0, 0.0),
            d: Vec3::from(self.d),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantumSettings {
    pub grid: GridPolicy,
    pub cutoff: CutoffPolicy,
    pub mode: EvolutionMode,
    /// RK4 steps per control interval; chosen from a stability estimate when absent.
    pub substeps: Option<usize>,
    /// Controls with `|u| > u_bound` are rejected; `2 max|u_ref| + 1` when absent.
    pub u_bound: Option<f64>,
    pub sample_every: usize,
}

impl Default for QuantumSettings {
    fn default() -> Self {
        QuantumSettings {
            grid: GridPolicy::default(),
            cutoff: CutoffPolicy::default(),
            mode: EvolutionMode::FullQuantum,
            substeps: None,
            u_bound: None,
            sample_every: 1,
        }
    }
}

/// Reduced objective `J(u) = Phi(f(T)) + k(u)` on one grid at one `hbar`.
pub struct QuantumProblem<'a> {
    pub cfg: &'a OCConfig,
    pub gen: Generator,
    pub f0: WignerState,
    pub target: TargetSymbol,
    pub substeps: usize,
    pub u_bound: f64,
    /// Forward and adjoint integrations performed so far.
    pub forward_runs: usize,
    pub adjoint_runs: usize,
    cache: Option<(ControlSignal, Vec<Comps>)>,
    stepper: Stepper,
}

#[derive(Clone, Debug)]
pub struct QuantumRun {
    pub final_state: WignerState,
    pub diagnostics: Vec<Diagnostics>,
    pub goal: f64,
}

impl<'a> QuantumProblem<'a> {
    pub fn new(
        cfg: &'a OCConfig,
        gen: Generator,
        f0: WignerState,
        target: TargetSymbol,
        substeps: usize,
        u_bound: f64,
    ) -> Result<Self> {
        let mut errs = cfg.validate();
        if !f0.grid.same_as(&gen.grid) || !target.raw.grid.same_as(&gen.grid) {
            errs.push("initial state, target and generator must share one grid".into());
        }
        if substeps == 0 {
            errs.push("substeps must be at least 1".into());
        }
        if !(u_bound > 0.0) {
            errs.push(format!("u_bound must be positive (got {u_bound})"));
        }
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let stepper = Stepper::new(gen.grid.len(), gen.control_dim());
        Ok(QuantumProblem {
            cfg,
            gen,
            f0,
            target,
            substeps,
            u_bound,
            forward_runs: 0,
            adjoint_runs: 0,
            cache: None,
            stepper,
        })
    }

    /// Build everything for one `hbar`: cut-off radius from the reference
    /// trajectory, grid, generator, stable substep count and initial packet.
    pub fn setup(
        cfg: &'a OCConfig,
        fields: &FieldSet,
        packet: &Packet,
        hbar: f64,
        settings: &QuantumSettings,
        u_ref: &ControlSignal,
        traj_ref: &ClassicalTrajectory,
    ) -> Result<Self> {
        let tube = tube_radius(traj_ref, hbar, packet.sigma, settings.cutoff.tube_sigmas);
        let radius = settings.cutoff.radius.unwrap_or(tube);
        check_radius(tube, radius)?;
        let ramp = settings.cutoff.ramp.unwrap_or(0.5 * radius);
        let reach = radius + ramp + settings.grid.margin;
        let xh = settings.grid.x_half.unwrap_or(reach);
        let ph = settings.grid.p_half.unwrap_or(reach);
        let grid = PhaseGrid::centered(settings.grid.nx, settings.grid.np, xh, ph)?;
        let target = build_target(&grid, hbar, cfg, radius, ramp)?;
        let f0 = coherent_wigner(&grid, hbar, packet.x, packet.p, packet.sigma, packet.d)?;
        let mut gen = Generator::new(&grid, hbar, cfg.mass, fields, settings.mode)?;
        let u_bound = settings.u_bound.unwrap_or(2.0 * u_ref.max_abs() + 1.0);
        let substeps = match settings.substeps {
            Some(s) => s,
            None => stable_substeps(&mut gen, fields, cfg, u_bound)?,
        };
        QuantumProblem::new(cfg, gen, f0, target, substeps, u_bound)
    }

    pub fn grid(&self) -> &PhaseGrid {
        &self.gen.grid
    }

    fn check_control(&self, u: &ControlSignal) -> Result<()> {
        u.check_compatible(&self.cfg.grid(), self.gen.control_dim())?;
        let m = u.max_abs();
        if !(m <= self.u_bound) {
            return Err(Error::Integration {
                time: 0.0,
                reason: format!("control amplitude {m:.4e} exceeds the stability bound {:.4e}", self.u_bound),
            });
        }
        Ok(())
    }

    /// States at every RK4 step boundary.
    fn forward_states(&mut self, u: &ControlSignal) -> Result<&[Comps]> {
        let hit = matches!(&self.cache, Some((c, _)) if c.values == u.values);
        if !hit {
            self.check_control(u)?;
            let s = self.substeps;
            let n = u.grid.intervals;
            let mut states = Vec::with_capacity(n * s + 1);
            let mut f = self.f0.comps.clone();
            states.push(f.clone());
            self.forward_runs += 1;
            for k in 0..n {
                for j in 0..s {
                    self.stepper.interval_part(&mut self.gen, &mut f, u, k, j, s, false);
                    if f.iter().any(|c| c.iter().any(|v| !v.is_finite())) {
                        let mut last = self.f0.clone();
                        last.comps = states.pop().unwrap_or_default();
                        last.time = u.grid.time(k) + u.grid.dt() * j as f64 / s as f64;
                        return Err(Error::WignerBlowUp {
                            time: last.time,
                            last_good: Box::new(last),
                        });
                    }
                    states.push(f.clone());
                }
            }
            self.cache = Some((u.clone(), states));
        }
        Ok(&self.cache.as_ref().unwrap().1)
    }

    pub fn final_state(&mut self, u: &ControlSignal) -> Result<WignerState> {
        let horizon = u.grid.horizon;
        let last = self.forward_states(u)?.last().unwrap().clone();
        let mut f = self.f0.clone();
        f.comps = last;
        f.time = horizon;
        Ok(f)
    }

    /// Forward run with diagnostics every `every` control intervals.
    pub fn run(&mut self, u: &ControlSignal, every: usize) -> Result<QuantumRun> {
        let s = self.substeps;
        let n = u.grid.intervals;
        let every = every.max(1);
        let states = self.forward_states(u)?.to_vec();
        let mut diagnostics = Vec::new();
        let mut f = self.f0.clone();
        for k in 0..=n {
            if k % every == 0 || k == n {
                f.comps = states[k * s].clone();
                f.time = u.grid.time(k);
                diagnostics.push(self.gen.diagnostics(&f)?);
            }
        }
        f.comps = states[n * s].clone();
        f.time = u.grid.horizon;
        let goal = goal_value(&self.target, &f)?;
        Ok(QuantumRun {
            final_state: f,
            diagnostics,
            goal,
        })
    }

    /// Adjoint states at the control nodes, from `h(T) = chi_R f_T` backward.
    pub fn adjoint_states(&mut self, u: &ControlSignal) -> Result<Vec<WignerState>> {
        self.check_control(u)?;
        let n = u.grid.intervals;
        let mut h = self.target.cut.clone();
        h.time = u.grid.horizon;
        let mut out = vec![h.clone()];
        for k in (0..n).rev() {
            self.stepper.interval(&mut self.gen, &mut h.comps, u, k, self.substeps, true);
            h.time = u.grid.time(k);
            if !h.is_finite() {
                return Err(Error::WignerBlowUp {
                    time: h.time,
                    last_good: Box::new(out.pop().unwrap()),
                });
            }
            out.push(h.clone());
        }
        out.reverse();
        Ok(out)
    }

    /// Goal part of the node gradient: the density `2 <h, Theta-_{phi_i}[f]>`
    /// tested against the hat functions (Simpson on the RK4 sub-grid when the
    /// substep count is even, trapezoid otherwise) over the trapezoid weights.
    pub fn goal_gradient_nodes(&mut self, u: &ControlSignal) -> Result<ControlSignal> {
        let s = self.substeps;
        let n = u.grid.intervals;
        let dim = self.gen.control_dim();
        let cell = self.gen.grid.cell();
        self.forward_states(u)?;
        let (_, states) = self.cache.take().unwrap();
        let mut density = vec![0.0; (n * s + 1) * dim];
        let mut h = self.target.cut.comps.clone();
        let mut tf: Comps = std::array::from_fn(|_| vec![0.0; self.gen.grid.len()]);
        self.adjoint_runs += 1;
        let mut result = Ok(());
        for idx in (0..=n * s).rev() {
            for i in 0..dim {
                theta_control(&mut self.gen, i, &states[idx], &mut tf);
                density[idx * dim + i] = 2.0 * dot(&h, &tf, cell);
            }
            if idx == 0 {
                break;
            }
            let (k, j) = ((idx - 1) / s, (idx - 1) % s);
            self.stepper.interval_part(&mut self.gen, &mut h, u, k, j, s, true);
            if h.iter().any(|c| c.iter().any(|v| !v.is_finite())) {
                result = Err(Error::Integration {
                    time: u.grid.time(k),
                    reason: "adjoint Wigner state became non-finite".into(),
                });
                break;
            }
        }
        self.cache = Some((u.clone(), states));
        result?;
        let dt = u.grid.dt();
        let hs = dt / s as f64;
        let mut g = ControlSignal::zeros(u.grid, dim);
        // Quadrature weights of sub-points on one interval for the rising and
        // falling hat.
        let base: Vec<f64> = (0..=s)
            .map(|j| {
                if s % 2 == 0 {
                    let w = if j == 0 || j == s {
                        1.0
                    } else if j % 2 == 1 {
                        4.0
                    } else {
                        2.0
                    };
                    w * hs / 3.0
                } else if j == 0 || j == s {
                    0.5 * hs
                } else {
                    hs
                }
            })
            .collect();
        for k in 0..=n {
            for i in 0..dim {
                let mut acc = 0.0;
                if k > 0 {
                    for j in 0..=s {
                        let rise = j as f64 / s as f64;
                        acc += base[j] * rise * density[((k - 1) * s + j) * dim + i];
                    }
                }
                if k < n {
                    for j in 0..=s {
                        let fall = 1.0 - j as f64 / s as f64;
                        acc += base[j] * fall * density[(k * s + j) * dim + i];
                    }
                }
                g.values[k * dim + i] = acc / u.grid.weight(k);
            }
        }
        Ok(g)
    }
}

impl ControlObjective for QuantumProblem<'_> {
    fn regularization(&self) -> (f64, f64) {
        (self.cfg.gamma, self.cfg.gamma_prime)
    }

    fn evaluate(&mut self, u: &ControlSignal) -> Result<Evaluation> {
        let f = self.final_state(u)?;
        Ok(Evaluation {
            goal: goal_value(&self.target, &f)?,
            cost: classical::cost_value(u, self.cfg),
        })
    }

    fn goal_gradient(&mut self, u: &ControlSignal) -> Result<(Evaluation, ControlSignal)> {
        let ev = self.evaluate(u)?;
        let g = self.goal_gradient_nodes(u)?;
        Ok((ev, g))
    }
}

/// Substeps per control interval such that RK4 stays inside its stability
/// region (`|lambda dt| <= 2.5` with a 20% margin on the estimate) and the
/// step respects [`cfl_limit`]. Rounded up to an even count.
pub fn stable_substeps(gen: &mut Generator, fields: &FieldSet, cfg: &OCConfig, u_bound: f64) -> Result<usize> {
    let dim = gen.control_dim();
    let mut rho: f64 = 0.0;
    for sign in [1.0, -1.0] {
        let u = vec![sign * u_bound; dim];
        rho = rho.max(spectral_radius(gen, &u, 40, 7));
    }
    let dt = cfg.horizon / cfg.intervals as f64;
    let cfl = cfl_limit(&gen.grid, fields, cfg.mass, &vec![u_bound; dim]);
    let need = (dt * rho * 1.2 / 2.5).max(dt / cfl).ceil().max(1.0) as usize;
    Ok(need + need % 2)
}

/// Optimize from `u0`.
pub fn optimize_quantum(
    problem: &mut QuantumProblem<'_>,
    u0: &ControlSignal,
    settings: &OptimizerSettings,
) -> Result<crate::optimize::OptimizationResult> {
    optimize(problem, u0, settings)
}

/// Classical optimum from `u = 0`.
pub fn classical_reference(
    fields: &FieldSet,
    cfg: &OCConfig,
    packet: &Packet,
    settings: &OptimizerSettings,
) -> Result<(crate::optimize::OptimizationResult, ClassicalTrajectory)> {
    let init = packet.classical();
    let mut prob = ClassicalProblem {
        fields,
        init: init.clone(),
        cfg,
    };
    let u0 = ControlSignal::zeros(cfg.grid(), fields.control_dim());
    let res = optimize(&mut prob, &u0, settings)?;
    let traj = classical::integrate_forward(fields, &init, &res.control, cfg)?;
    Ok((res, traj))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub hbar: f64,
    pub j_star: f64,
    pub goal: f64,
    pub cost: f64,
    pub u_dist_to_classical: f64,
    pub err_x: f64,
    pub err_p: f64,
    pub err_d: f64,
    pub var_x_t: f64,
    pub var_p_t: f64,
    pub iterations: usize,
    pub converged: bool,
    pub substeps: usize,
    pub nx: usize,
    pub np: usize,
    pub x_half: f64,
    pub p_half: f64,
    pub radius: f64,
}

impl SweepRow {
    pub const HEADER: [&'static str; 10] = [
        "hbar",
        "J_star",
        "goal",
        "cost",
        "u_dist_to_classical",
        "err_x",
        "err_p",
        "err_d",
        "var_x_T",
        "var_p_T",
    ];

    pub fn row(&self) -> Vec<f64> {
        vec![
            self.hbar,
            self.j_star,
            self.goal,
            self.cost,
            self.u_dist_to_classical,
            self.err_x,
            self.err_p,
            self.err_d,
            self.var_x_t,
            self.var_p_t,
        ]
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepMember {
    pub row: SweepRow,
    pub control: ControlSignal,
    pub history: Vec<IterationRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepTable {
    pub classical_objective: f64,
    pub classical_control: ControlSignal,
    pub members: Vec<SweepMember>,
    /// `hbar` values whose run failed, with the error text.
    pub failed: Vec<(f64, String)>,
}

impl SweepTable {
    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.members.iter().map(|m| m.row.row()).collect()
    }

    pub fn is_partial(&self) -> bool {
        !self.failed.is_empty()
    }
}

fn terminal_errors(f: &WignerState, reference: &ClassicalState) -> Result<(f64, f64, f64, f64, f64)> {
    let m = moments(f)?;
    let dd = [0, 1, 2].map(|i| m.spin[i] - reference.d[i]);
    Ok((
        (m.mean_x - reference.x[0]).abs(),
        (m.mean_p - reference.p[0]).abs(),
        (dd[0] * dd[0] + dd[1] * dd[1] + dd[2] * dd[2]).sqrt(),
        m.var_x,
        m.var_p,
    ))
}

pub struct SweepInputs<'a> {
    pub fields: &'a FieldSet,
    pub cfg: &'a OCConfig,
    pub packet: &'a Packet,
    pub quantum: &'a QuantumSettings,
    pub classical_optimizer: &'a OptimizerSettings,
    pub quantum_optimizer: &'a OptimizerSettings,
}

/// For each `hbar` (sorted decreasing): optimize from the classical optimum
/// `u0` and compare with it.
pub fn hbar_sweep(inp: &SweepInputs<'_>, hbars: &[f64]) -> Result<SweepTable> {
    let (cres, traj) = classical_reference(inp.fields, inp.cfg, inp.packet, inp.classical_optimizer)?;
    let u0 = cres.control.clone();
    let reference = traj.final_state();
    let mut hs = hbars.to_vec();
    hs.sort_by(|a, b| b.total_cmp(a));
    let mut members = Vec::new();
    let mut failed = Vec::new();
    for &hbar in &hs {
        let member = (|| -> Result<SweepMember> {
            let mut prob = QuantumProblem::setup(inp.cfg, inp.fields, inp.packet, hbar, inp.quantum, &u0, &traj)?;
            let res = optimize_quantum(&mut prob, &u0, inp.quantum_optimizer)?;
            let f = prob.final_state(&res.control)?;
            let (err_x, err_p, err_d, var_x_t, var_p_t) = terminal_errors(&f, &reference)?;
            let g = prob.grid().clone();
            Ok(SweepMember {
                row: SweepRow {
                    hbar,
                    j_star: res.evaluation.total(),
                    goal: res.evaluation.goal,
                    cost: res.evaluation.cost,
                    u_dist_to_classical: res.control.sub(&u0).l2_norm(),
                    err_x,
                    err_p,
                    err_d,
                    var_x_t,
                    var_p_t,
                    iterations: res.history.len() - 1,
                    converged: res.converged,
                    substeps: prob.substeps,
                    nx: g.nx,
                    np: g.np,
                    x_half: g.x_max(),
                    p_half: g.p_max(),
                    radius: prob.target.radius,
                },
                control: res.control,
                history: res.history,
            })
        })();
        match member {
            Ok(m) => members.push(m),
            Err(e) => failed.push((hbar, e.to_string())),
        }
    }
    Ok(SweepTable {
        classical_objective: cres.evaluation.total(),
        classical_control: u0,
        members,
        failed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsRow {
    pub hbar: f64,
    pub err_x: f64,
    pub err_p: f64,
    pub err_d: f64,
    pub var_x_t: f64,
    pub var_p_t: f64,
}

impl DynamicsRow {
    pub const HEADER: [&'static str; 6] = ["hbar", "err_x", "err_p", "err_d", "var_x_T", "var_p_T"];

    pub fn row(&self) -> Vec<f64> {
        vec![self.hbar, self.err_x, self.err_p, self.err_d, self.var_x_t, self.var_p_t]
    }
}

/// Terminal moment errors against the classical trajectory with the control
/// held fixed at `u`.
pub fn dynamics_sweep(
    fields: &FieldSet,
    cfg: &OCConfig,
    packet: &Packet,
    quantum: &QuantumSettings,
    u: &ControlSignal,
    hbars: &[f64],
) -> Result<Vec<DynamicsRow>> {
    let traj = classical::integrate_forward(fields, &packet.classical(), u, cfg)?;
    let reference = traj.final_state();
    let mut hs = hbars.to_vec();
    hs.sort_by(|a, b| b.total_cmp(a));
    let mut rows = Vec::new();
    for hbar in hs {
        let mut prob = QuantumProblem::setup(cfg, fields, packet, hbar, quantum, u, &traj)?;
        let f = prob.final_state(u)?;
        let (err_x, err_p, err_d, var_x_t, var_p_t) = terminal_errors(&f, &reference)?;
        rows.push(DynamicsRow {
            hbar,
            err_x,
            err_p,
            err_d,
            var_x_t,
            var_p_t,
        });
    }
    Ok(rows)
}
