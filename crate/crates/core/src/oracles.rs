//! Brute-force references: direct quadratures of the Theta operators and of
//! the Moyal product on tiny grids, finite-difference gradients, closed-form
//! trajectories and a matrix-form inner product. [`run_suite`] checks the fast
//! paths against all of them.

use std::f64::consts::PI;
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::classical::{self, ClassicalProblem, ClassicalState, OCConfig};
use crate::config::RunConfig;
use crate::control::ControlSignal;
use crate::dynamics::{self, EvolutionMode, EvolutionSpec, Generator};
use crate::error::{Error, Result};
use crate::fields::{FieldSet, ScalarShape, Vec3, VectorShape};
use crate::optimize::ControlObjective;
use crate::quantum::{self, CutoffPolicy, GridPolicy, QuantumProblem, QuantumSettings};
use crate::wigner::{self, coherent_wigner, inner_product, PhaseGrid, ThetaSign, WignerState};

/// A phase grid small enough for O(N^4)-O(N^6) sums.
#[derive(Clone, Debug)]
pub struct TinyGrid {
    pub grid: PhaseGrid,
}

impl TinyGrid {
    pub const MAX: usize = 16;

    pub fn new(grid: PhaseGrid) -> Result<Self> {
        if grid.nx > Self::MAX || grid.np > Self::MAX {
            return Err(Error::config(format!(
                "tiny grids are limited to {0} x {0} (got {1} x {2})",
                Self::MAX,
                grid.nx,
                grid.np
            )));
        }
        Ok(TinyGrid { grid })
    }

    /// Signed frequencies `-n/2 ..= n/2` with trapezoid weights (1/2 at both ends).
    fn freqs(n: usize, len: f64) -> Vec<(f64, f64)> {
        let h = (n / 2) as isize;
        (-h..=h)
            .map(|k| (2.0 * PI * k as f64 / len, if k.abs() == h { 0.5 } else { 1.0 }))
            .collect()
    }
}

/// `Theta+-_V[f]` by the double sum over `(eta, p')`.
pub fn direct_theta(v: impl Fn(f64) -> f64, f: &[f64], sign: ThetaSign, hbar: f64, tiny: &TinyGrid) -> Vec<f64> {
    let g = &tiny.grid;
    let etas = TinyGrid::freqs(g.np, g.p_len);
    let norm = 1.0 / g.np as f64;
    let mut out = vec![0.0; g.len()];
    for i in 0..g.nx {
        let x = g.x(i);
        let delta: Vec<Complex64> = etas
            .iter()
            .map(|&(eta, _)| {
                let (a, b) = (v(x + 0.5 * hbar * eta), v(x - 0.5 * hbar * eta));
                match sign {
                    ThetaSign::Minus => Complex64::new(0.0, -(a - b) / hbar),
                    ThetaSign::Plus => Complex64::new(a + b, 0.0),
                }
            })
            .collect();
        for j in 0..g.np {
            let p = g.p(j);
            let mut acc = Complex64::default();
            for (&(eta, w), d) in etas.iter().zip(&delta) {
                for jp in 0..g.np {
                    let ph = -eta * (p - g.p(jp));
                    acc += d * w * f[i * g.np + jp] * Complex64::new(ph.cos(), ph.sin());
                }
            }
            out[i * g.np + j] = acc.re * norm;
        }
    }
    out
}

/// `d f / dx` by the direct trigonometric sum (Nyquist mode dropped).
pub fn direct_deriv_x(f: &[f64], grid: &PhaseGrid) -> Vec<f64> {
    let mut out = vec![0.0; grid.len()];
    let n = grid.nx;
    for i in 0..n {
        for ip in 0..n {
            let dxv = (i as f64 - ip as f64) * grid.dx();
            let mut w = 0.0;
            for k in 0..n {
                let s = crate::spectral::signed_index(k, n);
                if 2 * k == n {
                    continue;
                }
                let mu = 2.0 * PI * s as f64 / grid.x_len;
                w -= mu * (mu * dxv).sin();
            }
            let w = w / n as f64;
            for j in 0..grid.np {
                out[i * grid.np + j] += w * f[ip * grid.np + j];
            }
        }
    }
    out
}

/// `R` of `[pK, f]_# = i hbar R` assembled from [`direct_theta`].
pub fn direct_moyal_commutator_pk(f: &[f64], k: impl Fn(f64) -> f64 + Copy, hbar: f64, tiny: &TinyGrid) -> Vec<f64> {
    let g = &tiny.grid;
    let tm = direct_theta(k, f, ThetaSign::Minus, hbar, tiny);
    let tp = direct_theta(k, &direct_deriv_x(f, g), ThetaSign::Plus, hbar, tiny);
    let mut out = vec![0.0; g.len()];
    for i in 0..g.nx {
        for j in 0..g.np {
            let n = i * g.np + j;
            out[n] = g.p(j) * tm[n] - 0.5 * tp[n];
        }
    }
    out
}

/// `F # G` by the literal four-fold sum over `(mu, eta, x', p')` of
/// `F(x - hbar eta/2, p + hbar mu/2) G(x', p') exp(i mu (x - x') + i eta (p - p'))`.
/// Limited to 8 x 8 grids.
pub fn direct_moyal_product(big_f: impl Fn(f64, f64) -> f64, g_field: &[f64], hbar: f64, tiny: &TinyGrid) -> Result<Vec<Complex64>> {
    let g = &tiny.grid;
    if g.nx > 8 || g.np > 8 {
        return Err(Error::config("the four-fold Moyal quadrature is limited to 8 x 8 grids"));
    }
    let mus = TinyGrid::freqs(g.nx, g.x_len);
    let etas = TinyGrid::freqs(g.np, g.p_len);
    let norm = 1.0 / (g.nx * g.np) as f64;
    let mut out = vec![Complex64::default(); g.len()];
    for i in 0..g.nx {
        let x = g.x(i);
        for j in 0..g.np {
            let p = g.p(j);
            let mut acc = Complex64::default();
            for &(mu, wm) in &mus {
                for &(eta, we) in &etas {
                    let fv = big_f(x - 0.5 * hbar * eta, p + 0.5 * hbar * mu) * wm * we;
                    for ip in 0..g.nx {
                        for jp in 0..g.np {
                            let ph = mu * (x - g.x(ip)) + eta * (p - g.p(jp));
                            acc += fv * g_field[ip * g.np + jp] * Complex64::new(ph.cos(), ph.sin());
                        }
                    }
                }
            }
            out[i * g.np + j] = acc * norm;
        }
    }
    Ok(out)
}

/// `R` of `[pK, f]_# = i hbar R` from the four-fold product: for real symbols
/// `f # pK = conj(pK # f)`, so `R = 2 Im(pK # f) / hbar`.
pub fn quadrature_moyal_commutator_pk(f: &[f64], k: impl Fn(f64) -> f64, hbar: f64, tiny: &TinyGrid) -> Result<Vec<f64>> {
    let prod = direct_moyal_product(|x, p| p * k(x), f, hbar, tiny)?;
    Ok(prod.iter().map(|z| 2.0 * z.im / hbar).collect())
}

/// Central difference of `objective` in node `k`, component `i`, divided by
/// the trapezoid weight of the node.
///
/// With `eps` given, one central difference at that step. Without it, central
/// differences at `h`, `10h` and `100h` with `h = 1e-5 max(1, |u|)` are
/// compared and the smaller step of the best-agreeing consecutive pair is
/// returned: small steps lose to roundoff when the node weight is small, large
/// ones to curvature.
pub fn fd_gradient(
    mut objective: impl FnMut(&ControlSignal) -> Result<f64>,
    u: &ControlSignal,
    k: usize,
    i: usize,
    eps: Option<f64>,
) -> Result<f64> {
    let idx = k * u.dim + i;
    let mut central = |e: f64| -> Result<f64> {
        let mut up = u.clone();
        up.values[idx] += e;
        let mut um = u.clone();
        um.values[idx] -= e;
        Ok((objective(&up)? - objective(&um)?) / (2.0 * e * u.grid.weight(k)))
    };
    if let Some(e) = eps {
        return central(e);
    }
    let h = 1e-5 * u.values[idx].abs().max(1.0);
    let d = [central(h)?, central(10.0 * h)?, central(100.0 * h)?];
    Ok(if (d[0] - d[1]).abs() <= (d[1] - d[2]).abs() { d[0] } else { d[1] })
}

/// Spin under `dd/dt = -2 B x d` for constant `B`.
pub fn precession_closed_form(b: Vec3, d0: Vec3, t: f64) -> Vec3 {
    let w = b * -2.0;
    let th = w.norm() * t;
    if w.norm() == 0.0 {
        return d0;
    }
    let n = w / w.norm();
    d0 * th.cos() + n.cross(&d0) * th.sin() + n * n.dot(&d0) * (1.0 - th.cos())
}

/// `(x, p)` of `m x'' = -k x` at time `t`.
pub fn oscillator_closed_form(stiffness: f64, mass: f64, x0: f64, p0: f64, t: f64) -> (f64, f64) {
    let w = (stiffness / mass).sqrt();
    (
        x0 * (w * t).cos() + p0 / (mass * w) * (w * t).sin(),
        -mass * w * x0 * (w * t).sin() + p0 * (w * t).cos(),
    )
}

/// Exact semi-discrete free streaming: every x-mode `mu` of the row at momentum
/// `p` picks up `exp(-i mu p t / m)` (Nyquist mode fixed). Direct sums.
pub fn free_transport(f: &WignerState, mass: f64, t: f64) -> WignerState {
    let g = &f.grid;
    let n = g.nx;
    let mut out = f.clone();
    out.time = f.time + t;
    for c in 0..4 {
        for j in 0..g.np {
            let p = g.p(j);
            for i in 0..n {
                let mut acc = 0.0;
                for k in 0..n {
                    let s = crate::spectral::signed_index(k, n);
                    let mu = 2.0 * PI * s as f64 / g.x_len;
                    let shift = if 2 * k == n { 0.0 } else { mu * p * t / mass };
                    for ip in 0..n {
                        let ph = mu * (i as f64 - ip as f64) * g.dx() - shift;
                        let w = if 2 * k == n {
                            (PI * (i as f64 - ip as f64)).cos()
                        } else {
                            ph.cos()
                        };
                        acc += w * f.comps[c][ip * g.np + j];
                    }
                }
                out.comps[c][i * g.np + j] = acc / n as f64;
            }
        }
    }
    out
}

type C2 = [[Complex64; 2]; 2];

fn pauli_matrix(c: [f64; 4]) -> C2 {
    let z = |re: f64, im: f64| Complex64::new(re, im);
    [
        [z(c[0] + c[3], 0.0), z(c[1], -c[2])],
        [z(c[1], c[2]), z(c[0] - c[3], 0.0)],
    ]
}

/// `1/2 tr int F^dagger H` with the 2 x 2 matrices rebuilt at every node.
pub fn matrix_inner_product(f: &WignerState, h: &WignerState) -> Result<f64> {
    f.check_same_grid(h)?;
    let mut s = Complex64::default();
    for n in 0..f.grid.len() {
        let a = pauli_matrix([0, 1, 2, 3].map(|c| f.comps[c][n]));
        let b = pauli_matrix([0, 1, 2, 3].map(|c| h.comps[c][n]));
        for r in 0..2 {
            for q in 0..2 {
                s += a[q][r].conj() * b[q][r];
            }
        }
    }
    Ok(0.5 * s.re * f.grid.cell())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub passed: bool,
    pub seed: u64,
    pub checks: Vec<Check>,
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_field(g: &PhaseGrid, rng: &mut impl Rng) -> Vec<f64> {
    (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_scalar(rng: &mut impl Rng) -> ScalarShape {
    ScalarShape::Cosine {
        amplitude: rng.random_range(0.2..1.0),
        wavevector: [rng.random_range(0.3..1.5), 0.0, 0.0],
        phase: rng.random_range(0.0..PI),
    }
}

fn random_smooth_state(g: &PhaseGrid, hbar: f64, rng: &mut impl Rng) -> WignerState {
    let mut s = WignerState::zeros(g, hbar);
    for c in 0..4 {
        let a: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        s.comps[c] = g.field(|x, p| {
            (a[0] + a[1] * x + a[2] * p + a[3] * (a[4] * x * p).cos()) * (-(x - 0.3 * a[4]).powi(2) / 1.5 - p * p / 1.2).exp()
        });
    }
    s
}

struct Suite {
    checks: Vec<Check>,
}

impl Suite {
    fn run(&mut self, name: &str, tolerance: f64, f: impl FnOnce() -> Result<f64>) {
        let t0 = Instant::now();
        let r = f();
        let seconds = t0.elapsed().as_secs_f64();
        let (value, error) = match r {
            Ok(v) => (v, None),
            Err(e) => (f64::NAN, Some(e.to_string())),
        };
        self.checks.push(Check {
            name: name.to_string(),
            value,
            tolerance,
            passed: error.is_none() && value <= tolerance,
            seconds,
            error,
        });
    }
}

/// Theta operators, Moyal commutators, the generator and the classical and
/// quantum gradients against their references. Fields, weights and `hbar`
/// come from `cfg`; random inputs from `cfg.seed`.
pub fn run_suite(cfg: &RunConfig) -> ValidationReport {
    let mut rng = rand::rngs::StdRng::seed_from_u64(cfg.seed);
    let mut suite = Suite { checks: Vec::new() };
    let hbar = cfg.hbar;

    for n in [8usize, 16] {
        let tiny = TinyGrid::new(PhaseGrid::centered(n, n, 3.0, 4.0).unwrap()).unwrap();
        let v = random_scalar(&mut rng);
        let f = random_field(&tiny.grid, &mut rng);
        for (sign, label) in [(ThetaSign::Minus, "minus"), (ThetaSign::Plus, "plus")] {
            let v = v.clone();
            let f = f.clone();
            let tg = tiny.clone();
            suite.run(&format!("theta_{label}_direct_{n}x{n}"), 1e-10, move || {
                let line = |s: f64| v.value(&Vec3::new(s, 0.0, 0.0));
                let fast = match sign {
                    ThetaSign::Minus => wigner::theta_minus(&tg.grid, hbar, line, &f)?,
                    ThetaSign::Plus => wigner::theta_plus(&tg.grid, hbar, line, &f)?,
                };
                Ok(max_abs_diff(&fast, &direct_theta(line, &f, sign, hbar, &tg)))
            });
        }
    }

    {
        let tiny = TinyGrid::new(PhaseGrid::centered(8, 8, 3.0, 4.0).unwrap()).unwrap();
        let k = random_scalar(&mut rng);
        let f = random_field(&tiny.grid, &mut rng);
        suite.run("moyal_commutator_triple_route_8x8", 1e-10, || {
            let line = |s: f64| k.value(&Vec3::new(s, 0.0, 0.0));
            let spectral = wigner::moyal_commutator_pk(&tiny.grid, hbar, line, &f)?;
            let assembled = direct_moyal_commutator_pk(&f, line, hbar, &tiny);
            let quad = quadrature_moyal_commutator_pk(&f, line, hbar, &tiny)?;
            Ok(max_abs_diff(&spectral, &assembled)
                .max(max_abs_diff(&spectral, &quad))
                .max(max_abs_diff(&assembled, &quad)))
        });
        let tiny16 = TinyGrid::new(PhaseGrid::centered(16, 16, 3.0, 4.0).unwrap()).unwrap();
        let f16 = random_field(&tiny16.grid, &mut rng);
        let fields = cfg.fields.clone();
        suite.run("rashba_operators_direct_16x16", 1e-10, || {
            let mut worst: f64 = 0.0;
            for kk in 0..3 {
                let ap = dynamics::a_plus(&tiny16.grid, hbar, &fields, &f16, kk)?;
                let am = dynamics::a_minus(&tiny16.grid, hbar, &fields, &f16, kk)?;
                let (c, j) = match kk {
                    0 => (0.0, 1),
                    1 => (-1.0, 2),
                    _ => (1.0, 1),
                };
                let line = |s: f64| fields.rashba_line(j, s);
                let r = direct_moyal_commutator_pk(&f16, line, hbar, &tiny16);
                let tp = direct_theta(line, &f16, ThetaSign::Plus, hbar, &tiny16);
                let tm = direct_theta(line, &direct_deriv_x(&f16, &tiny16.grid), ThetaSign::Minus, hbar, &tiny16);
                for n in 0..f16.len() {
                    let p = tiny16.grid.p(n % tiny16.grid.np);
                    worst = worst.max((ap[n] - c * hbar * r[n]).abs());
                    worst = worst.max((am[n] - c * (p * tp[n] + 0.5 * hbar * hbar * tm[n])).abs());
                }
            }
            Ok(worst)
        });
    }

    {
        let g = PhaseGrid::centered(16, 16, 4.0, 4.0).unwrap();
        let a = random_smooth_state(&g, hbar, &mut rng);
        let b = random_smooth_state(&g, hbar, &mut rng);
        suite.run("inner_product_matrix_form", 1e-12, || {
            let x = inner_product(&a, &b)?;
            Ok((x - matrix_inner_product(&a, &b)?).abs() / x.abs().max(1.0))
        });
    }

    {
        let g = PhaseGrid::centered(32, 32, 6.0, 6.0).unwrap();
        let states: Vec<WignerState> = (0..40).map(|_| random_smooth_state(&g, hbar, &mut rng)).collect();
        let u = vec![rng.random_range(-1.0..1.0); cfg.fields.control_dim()];
        let fields = cfg.fields.clone();
        suite.run("generator_antisymmetry_20_pairs", 1e-9, || {
            let mut gen = Generator::new(&g, hbar, cfg.oc.mass, &fields, EvolutionMode::FullQuantum)?;
            let mut worst: f64 = 0.0;
            for pair in states.chunks_exact(2) {
                let (f, h) = (&pair[0], &pair[1]);
                let mut lf = WignerState::zeros(&g, hbar);
                let mut lh = WignerState::zeros(&g, hbar);
                gen.apply(&f.comps, &u, &mut lf.comps);
                gen.apply(&h.comps, &u, &mut lh.comps);
                let s = inner_product(&lf, h)? + inner_product(f, &lh)?;
                worst = worst.max(s.abs() / (f.l2_norm() * h.l2_norm()));
            }
            Ok(worst)
        });
    }

    suite.run("free_transport_spectral_shift", 1e-9, || {
        let g = PhaseGrid::centered(64, 32, 6.0, 5.0)?;
        let f0 = coherent_wigner(&g, 0.5, -1.0, 0.8, 1.0, [0.0, 1.0, 0.0])?;
        let fields = FieldSet {
            controls: vec![ScalarShape::Constant { value: 0.0 }],
            ..Default::default()
        };
        let u = ControlSignal::zeros(crate::control::TimeGrid::new(0.5, 50)?, 1);
        let spec = EvolutionSpec {
            substeps: 4,
            ..EvolutionSpec::default()
        };
        let ev = dynamics::integrate(&f0, &u, &fields, 1.0, &spec)?;
        let exact = free_transport(&f0, 1.0, 0.5);
        let mut d = ev.final_state.clone();
        d.axpy(-1.0, &exact);
        Ok(d.l2_norm() / exact.l2_norm())
    });

    {
        let fields = cfg.fields.clone();
        let oc = cfg.oc.clone();
        let init = cfg.initial.classical();
        let u = ControlSignal::from_fn(oc.grid(), fields.control_dim(), |t, i| 0.5 + (2.0 * t + i as f64).sin());
        suite.run("classical_gradient_vs_fd", 1e-5, || {
            let mut prob = ClassicalProblem {
                fields: &fields,
                init: init.clone(),
                cfg: &oc,
            };
            let (_, gp) = prob.goal_gradient(&u)?;
            let mut g = gp;
            g.axpy(oc.gamma, &u);
            g.axpy(-oc.gamma_prime, &u.second_derivative());
            let mut worst: f64 = 0.0;
            let n = oc.intervals;
            for k in [1, n / 4, n / 2, 3 * n / 4, n - 1] {
                for i in 0..u.dim {
                    let fd = fd_gradient(|v| prob.evaluate(v).map(|e| e.total()), &u, k, i, None)?;
                    worst = worst.max((fd - g.get(k, i)).abs() / fd.abs().max(1e-8));
                }
            }
            Ok(worst)
        });
    }

    suite.run("precession_classical_and_wigner", 1e-6, || {
        let b = Vec3::new(0.3, -0.4, 0.8);
        let fields = FieldSet {
            controls: vec![ScalarShape::Constant { value: 0.0 }],
            magnetic: vec![VectorShape::Uniform { value: [b[0], b[1], b[2]] }],
            ..Default::default()
        };
        let oc = OCConfig {
            intervals: 100,
            substeps: 1,
            ..OCConfig::default()
        };
        let d0 = Vec3::new(1.0, 0.0, 0.0);
        let init = ClassicalState {
            x: Vec3::zeros(),
            p: Vec3::zeros(),
            d: d0,
        };
        let u = ControlSignal::zeros(oc.grid(), 1);
        let traj = classical::integrate_forward(&fields, &init, &u, &oc)?;
        let mut worst: f64 = 0.0;
        for k in 0..=oc.intervals {
            let t = oc.grid().time(k);
            let d = traj.node(k).d;
            worst = worst.max((d - precession_closed_form(b, d0, t)).norm());
            worst = worst.max((d.norm() - 1.0).abs() * 100.0);
        }
        let g = PhaseGrid::centered(32, 32, 6.0, 6.0)?;
        let f0 = coherent_wigner(&g, 1.0, 0.0, 0.0, 1.0, [1.0, 0.0, 0.0])?;
        let ev = dynamics::integrate(&f0, &u, &fields, 1.0, &EvolutionSpec::default())?;
        for dg in &ev.diagnostics {
            let d = Vec3::from(dg.spin);
            worst = worst.max((d - precession_closed_form(b, d0, dg.time)).norm());
            worst = worst.max((d.norm() - 1.0).abs() * 100.0);
        }
        Ok(worst)
    });

    suite.run("harmonic_closed_form", 1e-9, || {
        let fields = FieldSet {
            potential: vec![ScalarShape::Harmonic {
                stiffness: 2.0,
                center: [0.0; 3],
            }],
            controls: vec![ScalarShape::Constant { value: 0.0 }],
            ..Default::default()
        };
        let oc = OCConfig {
            mass: 1.5,
            intervals: 200,
            substeps: 1,
            ..OCConfig::default()
        };
        let init = ClassicalState {
            x: Vec3::new(0.7, 0.0, 0.0),
            p: Vec3::new(-0.2, 0.0, 0.0),
            d: Vec3::new(0.0, 0.0, 1.0),
        };
        let u = ControlSignal::zeros(oc.grid(), 1);
        let traj = classical::integrate_forward(&fields, &init, &u, &oc)?;
        let mut worst: f64 = 0.0;
        for k in 0..=oc.intervals {
            let (x, p) = oscillator_closed_form(2.0, 1.5, 0.7, -0.2, oc.grid().time(k));
            let s = traj.node(k);
            worst = worst.max((s.x[0] - x).abs()).max((s.p[0] - p).abs());
        }
        Ok(worst)
    });

    {
        let fields = cfg.fields.clone();
        suite.run("quantum_gradient_vs_fd_64x64", 1e-4, || {
            let oc = OCConfig {
                horizon: 0.5,
                intervals: 8,
                x_target: [0.5, 0.0, 0.0],
                ..cfg.oc.clone()
            };
            let packet = quantum::Packet {
                x: -0.3,
                p: 0.2,
                ..cfg.initial
            };
            let u = ControlSignal::from_fn(oc.grid(), fields.control_dim(), |t, _| 0.5 + 0.8 * (3.0 * t).sin());
            let traj = classical::integrate_forward(&fields, &packet.classical(), &u, &oc)?;
            let settings = QuantumSettings {
                grid: GridPolicy {
                    nx: 64,
                    np: 64,
                    ..Default::default()
                },
                cutoff: CutoffPolicy {
                    ramp: Some(1.5),
                    tube_sigmas: 6.0,
                    ..Default::default()
                },
                ..Default::default()
            };
            let mut prob = QuantumProblem::setup(&oc, &fields, &packet, 0.5, &settings, &u, &traj)?;
            let (_, gp) = prob.goal_gradient(&u)?;
            let mut g = gp;
            g.axpy(oc.gamma, &u);
            g.axpy(-oc.gamma_prime, &u.second_derivative());
            let mut worst: f64 = 0.0;
            for k in 1..oc.intervals {
                for i in 0..u.dim {
                    let fd = fd_gradient(|v| prob.evaluate(v).map(|e| e.total()), &u, k, i, Some(1e-4))?;
                    worst = worst.max((fd - g.get(k, i)).abs() / fd.abs().max(1e-8));
                }
            }
            Ok(worst)
        });
    }

    let passed = suite.checks.iter().all(|c| c.passed);
    ValidationReport {
        passed,
        seed: cfg.seed,
        checks: suite.checks,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n: usize) -> TinyGrid {
        TinyGrid::new(PhaseGrid::centered(n, n, 3.0, 4.0).unwrap()).unwrap()
    }

    #[test]
    fn tiny_grid_limit() {
        assert!(TinyGrid::new(PhaseGrid::centered(32, 8, 3.0, 3.0).unwrap()).is_err());
    }

    #[test]
    fn constant_symbol_has_zero_theta_minus() {
        let t = tiny(8);
        let mut rng = rand::rngs::StdRng::seed_from_u64(1);
        let f = random_field(&t.grid, &mut rng);
        let r = direct_theta(|_| 2.5, &f, ThetaSign::Minus, 0.7, &t);
        assert!(r.iter().all(|v| v.abs() < 1e-13));
        let r = direct_theta(|_| 2.5, &f, ThetaSign::Plus, 0.7, &t);
        assert!(max_abs_diff(&r, &f.iter().map(|v| 5.0 * v).collect::<Vec<_>>()) < 1e-12);
    }

    #[test]
    fn direct_theta_is_linear() {
        let t = tiny(8);
        let mut rng = rand::rngs::StdRng::seed_from_u64(2);
        let (f, g) = (random_field(&t.grid, &mut rng), random_field(&t.grid, &mut rng));
        let v = |s: f64| (0.9 * s).sin() + 0.2 * s * s;
        let comb: Vec<f64> = f.iter().zip(&g).map(|(a, b)| 1.5 * a - 0.4 * b).collect();
        let lhs = direct_theta(v, &comb, ThetaSign::Minus, 0.5, &t);
        let (a, b) = (direct_theta(v, &f, ThetaSign::Minus, 0.5, &t), direct_theta(v, &g, ThetaSign::Minus, 0.5, &t));
        let rhs: Vec<f64> = a.iter().zip(&b).map(|(a, b)| 1.5 * a - 0.4 * b).collect();
        assert!(max_abs_diff(&lhs, &rhs) < 1e-12);
    }

    #[test]
    fn direct_and_spectral_theta_agree() {
        for n in [8, 16] {
            let t = tiny(n);
            let mut rng = rand::rngs::StdRng::seed_from_u64(n as u64);
            let f = random_field(&t.grid, &mut rng);
            let v = |s: f64| (-(s - 0.4).powi(2)).exp() + 0.3 * (1.3 * s).cos();
            let a = wigner::theta_minus(&t.grid, 0.6, v, &f).unwrap();
            assert!(max_abs_diff(&a, &direct_theta(v, &f, ThetaSign::Minus, 0.6, &t)) < 1e-10);
            let b = wigner::theta_plus(&t.grid, 0.6, v, &f).unwrap();
            assert!(max_abs_diff(&b, &direct_theta(v, &f, ThetaSign::Plus, 0.6, &t)) < 1e-10);
        }
    }

    #[test]
    fn moyal_routes_agree() {
        let t = tiny(8);
        let mut rng = rand::rngs::StdRng::seed_from_u64(5);
        let f = random_field(&t.grid, &mut rng);
        let k = |s: f64| 0.4 * (0.8 * s + 0.2).cos();
        let a = direct_moyal_commutator_pk(&f, k, 0.5, &t);
        let b = quadrature_moyal_commutator_pk(&f, k, 0.5, &t).unwrap();
        let c = wigner::moyal_commutator_pk(&t.grid, 0.5, k, &f).unwrap();
        assert!(max_abs_diff(&a, &b) < 1e-10);
        assert!(max_abs_diff(&a, &c) < 1e-10);
    }

    #[test]
    fn constant_rashba_commutator_is_a_derivative() {
        let t = tiny(8);
        let mut rng = rand::rngs::StdRng::seed_from_u64(6);
        let f = random_field(&t.grid, &mut rng);
        let r = quadrature_moyal_commutator_pk(&f, |_| 0.7, 0.5, &t).unwrap();
        let d = direct_deriv_x(&f, &t.grid);
        assert!(max_abs_diff(&r, &d.iter().map(|v| -0.7 * v).collect::<Vec<_>>()) < 1e-10);
        // x-independent f: derivative and Theta- parts both vanish.
        let fp: Vec<f64> = (0..t.grid.len()).map(|n| (t.grid.p(n % 8)).sin()).collect();
        let r = quadrature_moyal_commutator_pk(&fp, |_| 0.7, 0.5, &t).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn fd_default_step_escapes_roundoff_on_fine_grids() {
        let grid = crate::control::TimeGrid::new(1.0, 2000).unwrap();
        let u = ControlSignal::from_fn(grid, 1, |t, _| 0.3 + 0.5 * t);
        // Large offset: one ulp of J is comparable to the node's contribution at eps = 1e-5.
        let obj = |v: &ControlSignal| Ok(1e3 + (0..=2000).map(|j| v.grid.weight(j) * v.values[j].sin()).sum::<f64>());
        let mut worst = (0.0f64, 0.0f64);
        for k in (1..2000).step_by(37) {
            let exact = u.values[k].cos();
            let rel = |d: f64| (d - exact).abs() / exact.abs();
            worst.0 = worst.0.max(rel(fd_gradient(obj, &u, k, 0, Some(1e-5)).unwrap()));
            worst.1 = worst.1.max(rel(fd_gradient(obj, &u, k, 0, None).unwrap()));
        }
        assert!(worst.1 < 0.2 * worst.0 && worst.1 < 1e-5, "{worst:?}");
    }

    #[test]
    fn fd_gradient_is_exact_for_quadratics() {
        let grid = crate::control::TimeGrid::new(1.0, 10).unwrap();
        let u = ControlSignal::from_fn(grid, 2, |t, i| t + i as f64);
        let obj = |v: &ControlSignal| Ok(0.5 * v.dot(v));
        for k in [0, 3, 10] {
            for i in 0..2 {
                let fd = fd_gradient(obj, &u, k, i, None).unwrap();
                assert!((fd - u.get(k, i)).abs() < 1e-8, "{fd} vs {}", u.get(k, i));
            }
        }
    }

    #[test]
    fn matrix_inner_product_matches_components() {
        let g = PhaseGrid::centered(8, 8, 3.0, 3.0).unwrap();
        let mut rng = rand::rngs::StdRng::seed_from_u64(3);
        let a = random_smooth_state(&g, 0.5, &mut rng);
        let b = random_smooth_state(&g, 0.5, &mut rng);
        assert!((inner_product(&a, &b).unwrap() - matrix_inner_product(&a, &b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn precession_closed_form_rotates_about_the_field() {
        let d = precession_closed_form(Vec3::new(0.0, 0.0, 1.0), Vec3::new(1.0, 0.0, 0.0), 0.3);
        assert!((d - Vec3::new(0.6f64.cos(), -0.6f64.sin(), 0.0)).norm() < 1e-15);
    }

    #[test]
    fn default_suite_passes() {
        let report = run_suite(&RunConfig::default());
        for c in &report.checks {
            assert!(c.passed, "{c:?}");
        }
        assert!(report.passed);
    }
}
