//! Classical spin-orbit trajectories, their adjoint, and the reduced gradient.

use nalgebra::SVector;
use serde::{Deserialize, Serialize};

use crate::control::{regularization_cost, ControlSignal, TimeGrid};
use crate::error::{Error, Result};
use crate::fields::{FieldSet, Vec3};
use crate::optimize::{ControlObjective, Evaluation};

type Y = SVector<f64, 9>;

/// Weights, targets and horizon shared by the classical and quantum problems.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OCConfig {
    pub mass: f64,
    pub horizon: f64,
    pub intervals: usize,
    /// RK4 steps per control interval.
    pub substeps: usize,
    pub nu_x: f64,
    pub nu_p: f64,
    pub nu_d: f64,
    pub gamma: f64,
    pub gamma_prime: f64,
    pub x_target: [f64; 3],
    /// When set, the momentum term penalizes `|p(T) - p_T|^2` instead of `|p(T)|^2`.
    pub p_target: Option<[f64; 3]>,
    pub d_target: [f64; 3],
}

impl Default for OCConfig {
    fn default() -> Self {
        OCConfig {
            mass: 1.0,
            horizon: 1.0,
            intervals: 64,
            substeps: 4,
            nu_x: 1.0,
            nu_p: 1.0,
            nu_d: 0.5,
            gamma: 0.05,
            gamma_prime: 0.001,
            x_target: [1.0, 0.0, 0.0],
            p_target: None,
            d_target: [0.0, 1.0, 0.0],
        }
    }
}

impl OCConfig {
    pub fn grid(&self) -> TimeGrid {
        TimeGrid {
            horizon: self.horizon,
            intervals: self.intervals,
        }
    }

    pub fn x_target(&self) -> Vec3 {
        Vec3::from(self.x_target)
    }

    pub fn p_target(&self) -> Vec3 {
        self.p_target.map(Vec3::from).unwrap_or_else(Vec3::zeros)
    }

    pub fn d_target(&self) -> Vec3 {
        Vec3::from(self.d_target)
    }

    pub fn validate(&self) -> Vec<String> {
        let mut e = Vec::new();
        if !(self.mass > 0.0) {
            e.push(format!("mass must be positive (got {})", self.mass));
        }
        if !(self.horizon > 0.0) {
            e.push(format!("horizon must be positive (got {})", self.horizon));
        }
        if self.intervals < 2 {
            e.push("at least two control intervals are required".into());
        }
        if self.substeps == 0 {
            e.push("substeps must be at least 1".into());
        }
        for (name, v) in [("nu_x", self.nu_x), ("nu_p", self.nu_p), ("nu_d", self.nu_d)] {
            if !(v >= 0.0) {
                e.push(format!("{name} must be nonnegative (got {v})"));
            }
        }
        if !(self.gamma >= 0.0) || !(self.gamma_prime >= 0.0) {
            e.push("gamma and gamma_prime must be nonnegative".into());
        } else if self.gamma == 0.0 && self.gamma_prime == 0.0 {
            e.push("gamma and gamma_prime cannot both vanish".into());
        }
        let dn = self.d_target().norm();
        if (dn - 1.0).abs() > 1e-9 {
            e.push(format!("d_target must be a unit vector (|d_T| = {dn})"));
        }
        e
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassicalState {
    pub x: Vec3,
    pub p: Vec3,
    pub d: Vec3,
}

impl ClassicalState {
    fn pack(&self) -> Y {
        let mut y = Y::zeros();
        y.fixed_rows_mut::<3>(0).copy_from(&self.x);
        y.fixed_rows_mut::<3>(3).copy_from(&self.p);
        y.fixed_rows_mut::<3>(6).copy_from(&self.d);
        y
    }

    fn unpack(y: &Y) -> Self {
        ClassicalState {
            x: y.fixed_rows::<3>(0).into(),
            p: y.fixed_rows::<3>(3).into(),
            d: y.fixed_rows::<3>(6).into(),
        }
    }
}

/// Adjoint variables `(x^h, p^h, eta^h)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjointState {
    pub xh: Vec3,
    pub ph: Vec3,
    pub eta: Vec3,
}

impl AdjointState {
    fn pack(&self) -> Y {
        ClassicalState {
            x: self.xh,
            p: self.ph,
            d: self.eta,
        }
        .pack()
    }

    fn unpack(y: &Y) -> Self {
        let s = ClassicalState::unpack(y);
        AdjointState {
            xh: s.x,
            ph: s.p,
            eta: s.d,
        }
    }
}

/// Samples on the fine grid (control intervals times substeps) together with
/// time derivatives, so that states between samples come from cubic Hermite
/// interpolation.
#[derive(Clone, Debug)]
struct Samples {
    h: f64,
    y: Vec<Y>,
    dy: Vec<Y>,
}

impl Samples {
    fn at(&self, t: f64) -> Y {
        let n = self.y.len() - 1;
        let s = (t / self.h).clamp(0.0, n as f64);
        let j = (s.floor() as usize).min(n - 1);
        let th = s - j as f64;
        if th == 0.0 {
            return self.y[j];
        }
        if th == 1.0 {
            return self.y[j + 1];
        }
        let h00 = (1.0 + 2.0 * th) * (1.0 - th) * (1.0 - th);
        let h10 = th * (1.0 - th) * (1.0 - th);
        let h01 = th * th * (3.0 - 2.0 * th);
        let h11 = th * th * (th - 1.0);
        self.y[j] * h00 + self.dy[j] * (h10 * self.h) + self.y[j + 1] * h01 + self.dy[j + 1] * (h11 * self.h)
    }
}

#[derive(Clone, Debug)]
pub struct ClassicalTrajectory {
    pub grid: TimeGrid,
    pub substeps: usize,
    samples: Samples,
}

impl ClassicalTrajectory {
    /// State at control node `k`.
    pub fn node(&self, k: usize) -> ClassicalState {
        ClassicalState::unpack(&self.samples.y[k * self.substeps])
    }

    pub fn at(&self, t: f64) -> ClassicalState {
        ClassicalState::unpack(&self.samples.at(t))
    }

    pub fn final_state(&self) -> ClassicalState {
        ClassicalState::unpack(self.samples.y.last().unwrap())
    }

    pub fn nodes(&self) -> Vec<ClassicalState> {
        (0..self.grid.nodes()).map(|k| self.node(k)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct AdjointTrajectory {
    pub grid: TimeGrid,
    pub substeps: usize,
    samples: Samples,
}

impl AdjointTrajectory {
    pub fn node(&self, k: usize) -> AdjointState {
        AdjointState::unpack(&self.samples.y[k * self.substeps])
    }

    pub fn at(&self, t: f64) -> AdjointState {
        AdjointState::unpack(&self.samples.at(t))
    }
}

fn forward_rhs(fields: &FieldSet, mass: f64, y: &Y, u: &[f64]) -> Y {
    let s = ClassicalState::unpack(y);
    let e = fields.electric_unchecked(&s.x, u);
    let omega = -fields.eval_total_precession_field(&s.x, &s.p);
    ClassicalState {
        x: s.p / mass,
        p: e,
        d: omega.cross(&s.d),
    }
    .pack()
}

fn adjoint_rhs(fields: &FieldSet, mass: f64, fw: &ClassicalState, u: &[f64], a: &Y) -> Y {
    let a = AdjointState::unpack(a);
    let (x, p) = (&fw.x, &fw.p);
    let k = fields.eval_rashba(x);
    let jk = fields.rashba_jacobian(x);
    let jb = fields.magnetic_jacobian(x);
    let je = fields.electric_jacobian_unchecked(x, u);
    let omega = -fields.eval_total_precession_field(x, p);
    let mut dph = -je.transpose() * a.xh;
    for l in 0..3 {
        let dk: Vec3 = jk.column(l).into();
        let db: Vec3 = jb.column(l).into();
        dph[l] += 2.0 * (p.cross(&dk) - db).dot(&a.eta);
    }
    AdjointState {
        xh: -a.ph / mass + k.cross(&a.eta) * 2.0,
        ph: dph,
        eta: omega.cross(&a.eta),
    }
    .pack()
}

fn check_finite(y: &Y, t: f64) -> Result<()> {
    if y.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Integration {
            time: t,
            reason: "non-finite state".into(),
        })
    }
}

/// RK4 for the characteristic system; the control is linear between nodes.
pub fn integrate_forward(
    fields: &FieldSet,
    init: &ClassicalState,
    u: &ControlSignal,
    cfg: &OCConfig,
) -> Result<ClassicalTrajectory> {
    let grid = cfg.grid();
    u.check_compatible(&grid, fields.control_dim())?;
    let s = cfg.substeps.max(1);
    let h = grid.dt() / s as f64;
    let m = cfg.mass;
    let dim = u.dim;
    let (mut ua, mut um, mut ub) = (vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]);
    let mut y = init.pack();
    check_finite(&y, 0.0)?;
    let mut ys = Vec::with_capacity(grid.intervals * s + 1);
    let mut dys = Vec::with_capacity(grid.intervals * s + 1);
    for k in 0..grid.intervals {
        for j in 0..s {
            let th = j as f64 / s as f64;
            u.interp_into(k, th, &mut ua);
            u.interp_into(k, th + 0.5 / s as f64, &mut um);
            u.interp_into(k, th + 1.0 / s as f64, &mut ub);
            let k1 = forward_rhs(fields, m, &y, &ua);
            ys.push(y);
            dys.push(k1);
            let k2 = forward_rhs(fields, m, &(y + k1 * (0.5 * h)), &um);
            let k3 = forward_rhs(fields, m, &(y + k2 * (0.5 * h)), &um);
            let k4 = forward_rhs(fields, m, &(y + k3 * h), &ub);
            y += (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
            check_finite(&y, grid.time(k) + (j + 1) as f64 * h)?;
        }
    }
    u.interp_into(grid.intervals - 1, 1.0, &mut ub);
    dys.push(forward_rhs(fields, m, &y, &ub));
    ys.push(y);
    Ok(ClassicalTrajectory {
        grid,
        substeps: s,
        samples: Samples { h, y: ys, dy: dys },
    })
}

/// Final values of the adjoint.
pub fn adjoint_final(fin: &ClassicalState, cfg: &OCConfig) -> AdjointState {
    AdjointState {
        xh: -(fin.p - cfg.p_target()) * cfg.nu_p,
        ph: (cfg.x_target() - fin.x) * cfg.nu_x,
        eta: cfg.d_target().cross(&fin.d) * cfg.nu_d,
    }
}

/// Backward RK4 for the adjoint system from its final values.
pub fn integrate_adjoint(
    fields: &FieldSet,
    traj: &ClassicalTrajectory,
    u: &ControlSignal,
    cfg: &OCConfig,
) -> Result<AdjointTrajectory> {
    let grid = traj.grid;
    u.check_compatible(&grid, fields.control_dim())?;
    let s = traj.substeps;
    let h = traj.samples.h;
    let m = cfg.mass;
    let n = grid.intervals * s;
    let dim = u.dim;
    let (mut ua, mut um, mut ub) = (vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]);
    let mut a = adjoint_final(&traj.final_state(), cfg).pack();
    let mut ys = vec![Y::zeros(); n + 1];
    let mut dys = vec![Y::zeros(); n + 1];
    for idx in (0..n).rev() {
        let (k, j) = (idx / s, idx % s);
        let th = j as f64 / s as f64;
        u.interp_into(k, th, &mut ua);
        u.interp_into(k, th + 0.5 / s as f64, &mut um);
        u.interp_into(k, th + 1.0 / s as f64, &mut ub);
        let fa = ClassicalState::unpack(&traj.samples.y[idx]);
        let fb = ClassicalState::unpack(&traj.samples.y[idx + 1]);
        let fm = ClassicalState::unpack(&traj.samples.at((idx as f64 + 0.5) * h));
        let k1 = adjoint_rhs(fields, m, &fb, &ub, &a);
        ys[idx + 1] = a;
        dys[idx + 1] = k1;
        let k2 = adjoint_rhs(fields, m, &fm, &um, &(a - k1 * (0.5 * h)));
        let k3 = adjoint_rhs(fields, m, &fm, &um, &(a - k2 * (0.5 * h)));
        let k4 = adjoint_rhs(fields, m, &fa, &ua, &(a - k3 * h));
        a -= (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
        check_finite(&a, idx as f64 * h)?;
    }
    u.interp_into(0, 0.0, &mut ua);
    dys[0] = adjoint_rhs(fields, m, &ClassicalState::unpack(&traj.samples.y[0]), &ua, &a);
    ys[0] = a;
    Ok(AdjointTrajectory {
        grid,
        substeps: s,
        samples: Samples { h, y: ys, dy: dys },
    })
}

pub fn goal_value(fin: &ClassicalState, cfg: &OCConfig) -> f64 {
    0.5 * cfg.nu_x * (fin.x - cfg.x_target()).norm_squared()
        + 0.5 * cfg.nu_p * (fin.p - cfg.p_target()).norm_squared()
        - cfg.nu_d * cfg.d_target().dot(&fin.d)
}

pub fn cost_value(u: &ControlSignal, cfg: &OCConfig) -> f64 {
    regularization_cost(u, cfg.gamma, cfg.gamma_prime)
}

/// Goal part `-x^h . dE/du_i` of the gradient, tested against the piecewise
/// linear basis functions with Simpson's rule on every interval and divided by
/// the trapezoid weights. This is the node gradient of the discretized goal.
pub fn goal_gradient(
    fields: &FieldSet,
    traj: &ClassicalTrajectory,
    adj: &AdjointTrajectory,
) -> ControlSignal {
    let grid = traj.grid;
    let dim = fields.control_dim();
    let dt = grid.dt();
    let density = |t: f64, out: &mut [f64]| {
        let s = traj.at(t);
        let a = adj.at(t);
        for (i, o) in out.iter_mut().enumerate() {
            *o = -a.xh.dot(&fields.electric_control_derivative(&s.x, i));
        }
    };
    let n = grid.intervals;
    let mut at_nodes = vec![0.0; (n + 1) * dim];
    let mut at_mids = vec![0.0; n * dim];
    for k in 0..=n {
        density(grid.time(k), &mut at_nodes[k * dim..(k + 1) * dim]);
    }
    for k in 0..n {
        density(grid.time(k) + 0.5 * dt, &mut at_mids[k * dim..(k + 1) * dim]);
    }
    let mut g = ControlSignal::zeros(grid, dim);
    for k in 0..=n {
        for i in 0..dim {
            let mut acc = 0.0;
            if k > 0 {
                acc += dt / 6.0 * (at_nodes[k * dim + i] + 2.0 * at_mids[(k - 1) * dim + i]);
            }
            if k < n {
                acc += dt / 6.0 * (at_nodes[k * dim + i] + 2.0 * at_mids[k * dim + i]);
            }
            g.values[k * dim + i] = acc / grid.weight(k);
        }
    }
    g
}

/// `g = gamma u - gamma' u'' + goal part`.
pub fn control_gradient(
    u: &ControlSignal,
    fields: &FieldSet,
    traj: &ClassicalTrajectory,
    adj: &AdjointTrajectory,
    cfg: &OCConfig,
) -> ControlSignal {
    let mut g = goal_gradient(fields, traj, adj);
    g.axpy(cfg.gamma, u);
    g.axpy(-cfg.gamma_prime, &u.second_derivative());
    g
}

pub fn validate_initial(init: &ClassicalState) -> Vec<String> {
    let mut e = Vec::new();
    let n = init.d.norm();
    if (n - 1.0).abs() > 1e-9 {
        e.push(format!("initial spin must be a unit vector (|d| = {n})"));
    }
    if !init.pack().iter().all(|v| v.is_finite()) {
        e.push("initial state must be finite".into());
    }
    e
}

/// Reduced objective for the classical problem.
pub struct ClassicalProblem<'a> {
    pub fields: &'a FieldSet,
    pub init: ClassicalState,
    pub cfg: &'a OCConfig,
}

impl ControlObjective for ClassicalProblem<'_> {
    fn regularization(&self) -> (f64, f64) {
        (self.cfg.gamma, self.cfg.gamma_prime)
    }

    fn evaluate(&mut self, u: &ControlSignal) -> Result<Evaluation> {
        let traj = integrate_forward(self.fields, &self.init, u, self.cfg)?;
        Ok(Evaluation {
            goal: goal_value(&traj.final_state(), self.cfg),
            cost: cost_value(u, self.cfg),
        })
    }

    fn goal_gradient(&mut self, u: &ControlSignal) -> Result<(Evaluation, ControlSignal)> {
        let traj = integrate_forward(self.fields, &self.init, u, self.cfg)?;
        let adj = integrate_adjoint(self.fields, &traj, u, self.cfg)?;
        let ev = Evaluation {
            goal: goal_value(&traj.final_state(), self.cfg),
            cost: cost_value(u, self.cfg),
        };
        Ok((ev, goal_gradient(self.fields, &traj, &adj)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{ScalarShape, VectorShape};

    fn harmonic_fields() -> FieldSet {
        FieldSet {
            potential: vec![ScalarShape::Harmonic {
                stiffness: 1.0,
                center: [0.0; 3],
            }],
            controls: vec![ScalarShape::Linear {
                gradient: [-1.0, 0.0, 0.0],
            }],
            ..Default::default()
        }
    }

    fn cfg(n: usize) -> OCConfig {
        OCConfig {
            mass: 1.0,
            horizon: 1.0,
            intervals: n,
            substeps: 1,
            nu_x: 1.0,
            nu_p: 1.0,
            nu_d: 1.0,
            gamma: 0.1,
            gamma_prime: 0.01,
            x_target: [1.0, 0.0, 0.0],
            p_target: None,
            d_target: [0.0, 1.0, 0.0],
        }
    }

    #[test]
    fn free_oscillator_matches_closed_form() {
        let f = harmonic_fields();
        let c = OCConfig {
            horizon: std::f64::consts::PI,
            ..cfg(400)
        };
        let u = ControlSignal::zeros(c.grid(), 1);
        let init = ClassicalState {
            x: Vec3::new(1.0, 0.0, 0.0),
            p: Vec3::zeros(),
            d: Vec3::new(0.0, 0.0, 1.0),
        };
        let tr = integrate_forward(&f, &init, &u, &c).unwrap();
        for k in [0, 100, 250, 400] {
            let t = c.grid().time(k);
            let s = tr.node(k);
            assert!((s.x[0] - t.cos()).abs() < 1e-9);
            assert!((s.p[0] + t.sin()).abs() < 1e-9);
        }
    }

    #[test]
    fn precession_in_uniform_field() {
        let f = FieldSet {
            magnetic: vec![VectorShape::Uniform {
                value: [0.0, 0.0, 1.0],
            }],
            ..harmonic_fields()
        };
        let c = cfg(1000);
        let u = ControlSignal::zeros(c.grid(), 1);
        let init = ClassicalState {
            x: Vec3::zeros(),
            p: Vec3::zeros(),
            d: Vec3::new(1.0, 0.0, 0.0),
        };
        let tr = integrate_forward(&f, &init, &u, &c).unwrap();
        let d = tr.final_state().d;
        // d' = -2 B x d rotates clockwise about z at rate 2.
        assert!((d - Vec3::new(2f64.cos(), -2f64.sin(), 0.0)).norm() < 1e-10);
    }

    #[test]
    fn goal_at_target_is_minus_nu_d() {
        let c = cfg(10);
        let s = ClassicalState {
            x: c.x_target(),
            p: Vec3::zeros(),
            d: c.d_target(),
        };
        assert!((goal_value(&s, &c) + c.nu_d).abs() < 1e-15);
    }

    #[test]
    fn wrong_control_shape_is_rejected() {
        let f = harmonic_fields();
        let c = cfg(10);
        let u = ControlSignal::zeros(TimeGrid::new(1.0, 7).unwrap(), 1);
        let init = ClassicalState {
            x: Vec3::zeros(),
            p: Vec3::zeros(),
            d: Vec3::new(1.0, 0.0, 0.0),
        };
        assert!(matches!(
            integrate_forward(&f, &init, &u, &c),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let f = FieldSet {
            magnetic: vec![VectorShape::Cosine {
                amplitude: [0.2, 0.1, 0.6],
                wavevector: [0.7, 0.0, 0.0],
                phase: 0.2,
            }],
            rashba: vec![VectorShape::Gaussian {
                amplitude: [0.1, 0.5, 0.3],
                center: [0.2, 0.0, 0.0],
                width: 1.2,
            }],
            ..harmonic_fields()
        };
        let c = OCConfig {
            p_target: Some([0.2, 0.0, 0.0]),
            ..cfg(60)
        };
        let u = ControlSignal::from_fn(c.grid(), 1, |t, _| 0.5 + (3.0 * t).sin());
        let init = ClassicalState {
            x: Vec3::new(-0.5, 0.0, 0.0),
            p: Vec3::new(0.3, 0.0, 0.0),
            d: Vec3::new(1.0, 0.0, 0.0),
        };
        let tr = integrate_forward(&f, &init, &u, &c).unwrap();
        let adj = integrate_adjoint(&f, &tr, &u, &c).unwrap();
        let g = control_gradient(&u, &f, &tr, &adj, &c);
        let j = |v: &ControlSignal| {
            goal_value(&integrate_forward(&f, &init, v, &c).unwrap().final_state(), &c)
                + cost_value(v, &c)
        };
        let mut worst = 0.0f64;
        let mut scale = 0.0f64;
        for k in 0..=c.intervals {
            let h = 1e-5;
            let mut up = u.clone();
            let mut um = u.clone();
            up.values[k] += h;
            um.values[k] -= h;
            let fd = (j(&up) - j(&um)) / (2.0 * h) / c.grid().weight(k);
            worst = worst.max((fd - g.values[k]).abs());
            scale = scale.max(fd.abs());
        }
        assert!(worst / scale < 1e-6, "relative error {}", worst / scale);
    }
}
