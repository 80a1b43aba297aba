//! Right-hand side of the Pauli-component Wigner system and RK4 time stepping.
//!
//! In the reduced model (`x` and `p` along the first axis) only the `i = 1`
//! terms of the Rashba operators survive:
//!
//! ```text
//! A+[h]_2 = -hbar R_{K3} h,   A+[h]_3 = hbar R_{K2} h,   R_K = p Theta-_K - 1/2 Theta+_K d/dx
//! A-[h]_2 = -S_{K3} h,        A-[h]_3 = S_{K2} h,        S_K = p Theta+_K + hbar^2/2 Theta-_K d/dx
//! ```
//!
//! The generator uses the Weyl-symmetrized forms
//! `R_K = (p T- + T- p)/2 - (T+ D + D T+)/4` and
//! `S_K = (p T+ + T+ p)/2 + hbar^2 (T- D + D T-)/4`, which coincide with the
//! forms above in the continuum and are exactly skew/symmetric on the periodic
//! grid, so the discrete generator is skew-adjoint.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::control::ControlSignal;
use crate::error::{Error, Result};
use crate::fields::FieldSet;
use crate::spectral::Spectral;
use crate::wigner::{h1p_norm_with, moments, PhaseGrid, ThetaSign, ThetaTable, WignerState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvolutionMode {
    FullQuantum,
    UniformField,
    Semiclassical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ordering {
    /// Weyl-symmetrized products; exactly skew on the grid.
    Symmetric,
    /// `p Theta[h]` and `Theta[dh/dx]` as written.
    Plain,
}

fn default_substeps() -> usize {
    1
}

fn default_sample_every() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolutionSpec {
    pub mode: EvolutionMode,
    /// RK4 steps per control interval.
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    /// Record diagnostics every this many control intervals.
    #[serde(default = "default_sample_every")]
    pub sample_every: usize,
}

impl Default for EvolutionSpec {
    fn default() -> Self {
        EvolutionSpec {
            mode: EvolutionMode::FullQuantum,
            substeps: 1,
            sample_every: 1,
        }
    }
}

/// `0.5 min(dx m / p_max, dp / max|U'|, 1 / (2 max|B_tot|))` on the grid, with
/// `u_max[i]` bounding `|u_i|`.
pub fn cfl_limit(grid: &PhaseGrid, fields: &FieldSet, mass: f64, u_max: &[f64]) -> f64 {
    let p_max = grid.p_min.abs().max(grid.p_max().abs());
    let mut du: f64 = 0.0;
    let mut btot: f64 = 0.0;
    for i in 0..grid.nx {
        let x = grid.x(i);
        let mut d = fields.potential_line_deriv(x).abs();
        for (c, um) in u_max.iter().enumerate() {
            d += um.abs() * fields.control_line_deriv(c, x).abs();
        }
        du = du.max(d);
        for p in [-p_max, p_max] {
            let xv = crate::fields::Vec3::new(x, 0.0, 0.0);
            let pv = crate::fields::Vec3::new(p, 0.0, 0.0);
            btot = btot.max(fields.eval_total_precession_field(&xv, &pv).norm());
        }
    }
    let mut m = grid.dx() * mass / p_max.max(1e-300);
    if du > 0.0 {
        m = m.min(grid.dp() / du);
    }
    if btot > 0.0 {
        m = m.min(1.0 / (2.0 * btot));
    }
    0.5 * m
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub time: f64,
    pub mass: f64,
    pub l2: f64,
    pub h1p: f64,
    pub mean_x: f64,
    pub mean_p: f64,
    pub spin: [f64; 3],
    pub var_x: f64,
    pub var_p: f64,
}

impl Diagnostics {
    pub const HEADER: [&'static str; 11] = [
        "time", "mass", "l2", "h1p", "mean_x", "mean_p", "d1", "d2", "d3", "var_x", "var_p",
    ];

    pub fn header() -> &'static [&'static str] {
        &Self::HEADER
    }

    pub fn row(&self) -> Vec<f64> {
        vec![
            self.time,
            self.mass,
            self.l2,
            self.h1p,
            self.mean_x,
            self.mean_p,
            self.spin[0],
            self.spin[1],
            self.spin[2],
            self.var_x,
            self.var_p,
        ]
    }
}

type Comps = [Vec<f64>; 4];

fn zero_comps(n: usize) -> Comps {
    [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]]
}

/// Precomputed operator data for one grid, `hbar`, mass and field set.
pub struct Generator {
    pub grid: PhaseGrid,
    pub hbar: f64,
    pub mass: f64,
    pub mode: EvolutionMode,
    pub ordering: Ordering,
    sp: Spectral,
    // Theta- tables for U0 and every control profile.
    u0: ThetaTable,
    phi: Vec<ThetaTable>,
    // Rashba components 2 and 3 (index 0 -> K2, 1 -> K3) and Zeeman 1..3.
    k_minus: [ThetaTable; 2],
    k_plus: [ThetaTable; 2],
    b_minus: [ThetaTable; 3],
    b_plus: [ThetaTable; 3],
    // Line values and derivatives for the local modes.
    line: LineFields,
    ws: Workspace,
}

struct LineFields {
    du0: Vec<f64>,
    dphi: Vec<Vec<f64>>,
    k: [Vec<f64>; 3],
    dk: [Vec<f64>; 3],
    b: [Vec<f64>; 3],
    db: [Vec<f64>; 3],
}

struct Workspace {
    z: [Vec<Complex64>; 4],
    zp: [Vec<Complex64>; 4],
    zd: [Vec<Complex64>; 4],
    acc: [Vec<Complex64>; 12],
    dh: Comps,
    tmp: Comps,
    tmp2: Comps,
    packed: Vec<Complex64>,
}

impl Workspace {
    fn new(n: usize) -> Self {
        let c = || vec![Complex64::default(); n];
        Workspace {
            z: [c(), c(), c(), c()],
            zp: [c(), c(), c(), c()],
            zd: [c(), c(), c(), c()],
            acc: std::array::from_fn(|_| c()),
            dh: zero_comps(n),
            tmp: zero_comps(n),
            tmp2: zero_comps(n),
            packed: c(),
        }
    }
}

/// Split the transform of `a + i b` into the transforms of `a` and `b`, using
/// `A[k] = (Z[k] + conj Z[-k]) / 2` and `B[k] = (Z[k] - conj Z[-k]) / (2i)`
/// along every row.
fn unpack_pair(z: &[Complex64], np: usize, a: &mut [Complex64], b: &mut [Complex64]) {
    for ((zr, ar), br) in z.chunks_exact(np).zip(a.chunks_exact_mut(np)).zip(b.chunks_exact_mut(np)) {
        for k in 0..np {
            let zk = zr[k];
            let zm = zr[(np - k) % np].conj();
            ar[k] = (zk + zm) * 0.5;
            let d = (zk - zm) * 0.5;
            br[k] = Complex64::new(d.im, -d.re);
        }
    }
}

impl Generator {
    pub fn new(grid: &PhaseGrid, hbar: f64, mass: f64, fields: &FieldSet, mode: EvolutionMode) -> Result<Self> {
        let mut errs = grid.validate();
        if !(hbar > 0.0) {
            errs.push(format!("hbar must be positive (got {hbar})"));
        }
        if !(mass > 0.0) {
            errs.push(format!("mass must be positive (got {mass})"));
        }
        if mode == EvolutionMode::UniformField && !fields.spin_fields_uniform() {
            errs.push("uniform_field mode requires constant Zeeman and Rashba fields".into());
        }
        if !fields.line_invariant() {
            errs.push("the potential must not push particles off the x1 axis (reduced model)".into());
        }
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let n = grid.len();
        let tm = |v: &dyn Fn(f64) -> f64| ThetaTable::new(grid, hbar, ThetaSign::Minus, v);
        let tp = |v: &dyn Fn(f64) -> f64| ThetaTable::new(grid, hbar, ThetaSign::Plus, v);
        let u0 = tm(&|s| fields.potential_line(s));
        let phi = (0..fields.control_dim())
            .map(|i| tm(&|s| fields.control_line(i, s)))
            .collect();
        let k_minus = [tm(&|s| fields.rashba_line(1, s)), tm(&|s| fields.rashba_line(2, s))];
        let k_plus = [tp(&|s| fields.rashba_line(1, s)), tp(&|s| fields.rashba_line(2, s))];
        let b_minus = std::array::from_fn(|k| tm(&|s| fields.magnetic_line(k, s)));
        let b_plus = std::array::from_fn(|k| tp(&|s| fields.magnetic_line(k, s)));
        let xs: Vec<f64> = (0..grid.nx).map(|i| grid.x(i)).collect();
        let on = |f: &dyn Fn(f64) -> f64| xs.iter().map(|&x| f(x)).collect::<Vec<f64>>();
        let line = LineFields {
            du0: on(&|s| fields.potential_line_deriv(s)),
            dphi: (0..fields.control_dim())
                .map(|i| on(&|s| fields.control_line_deriv(i, s)))
                .collect(),
            k: std::array::from_fn(|k| on(&|s| fields.rashba_line(k, s))),
            dk: std::array::from_fn(|k| on(&|s| fields.rashba_line_deriv(k, s))),
            b: std::array::from_fn(|k| on(&|s| fields.magnetic_line(k, s))),
            db: std::array::from_fn(|k| on(&|s| fields.magnetic_line_deriv(k, s))),
        };
        Ok(Generator {
            grid: grid.clone(),
            hbar,
            mass,
            mode,
            ordering: Ordering::Symmetric,
            sp: grid.spectral(),
            u0,
            phi,
            k_minus,
            k_plus,
            b_minus,
            b_plus,
            line,
            ws: Workspace::new(n),
        })
    }

    pub fn control_dim(&self) -> usize {
        self.phi.len()
    }

    pub fn control_table(&self, i: usize) -> &ThetaTable {
        &self.phi[i]
    }

    pub fn spectral(&mut self) -> &mut Spectral {
        &mut self.sp
    }

    /// `out = L(u) f`.
    pub fn apply(&mut self, f: &Comps, u: &[f64], out: &mut Comps) {
        match self.mode {
            EvolutionMode::FullQuantum => self.apply_full(f, u, out),
            EvolutionMode::UniformField => self.apply_uniform(f, u, out),
            EvolutionMode::Semiclassical => self.apply_semiclassical(f, u, out),
        }
    }

    /// `dh = d/dx` of all four components.
    fn deriv_x_all(&mut self, f: &Comps) {
        let lx = self.grid.x_len;
        let [d0, d1, d2, d3] = &mut self.ws.dh;
        self.sp.deriv_x(lx, &f[0], Some(&f[1]), d0, Some(d1));
        self.sp.deriv_x(lx, &f[2], Some(&f[3]), d2, Some(d3));
    }

    fn transport_into(&self, f_dx: &Comps, out: &mut Comps) {
        let np = self.grid.np;
        for (o, d) in out.iter_mut().zip(f_dx) {
            for (orow, drow) in o.chunks_exact_mut(np).zip(d.chunks_exact(np)) {
                for j in 0..np {
                    orow[j] = -self.grid.p(j) / self.mass * drow[j];
                }
            }
        }
    }

    /// `T-_U` applied to every component, accumulated into `acc[a]`.
    fn potential_terms(&mut self, u: &[f64]) {
        let Workspace { z, acc, .. } = &mut self.ws;
        for a in 0..4 {
            self.u0.mul_acc(1.0, &z[a], &mut acc[a]);
            for (ui, t) in u.iter().zip(&self.phi) {
                if *ui != 0.0 {
                    t.mul_acc(*ui, &z[a], &mut acc[a]);
                }
            }
        }
    }

    fn to_eta_all(&mut self, src: &Comps, dst: usize) {
        let np = self.grid.np;
        for pair in [[0usize, 1usize], [2, 3]] {
            self.sp.to_eta(&src[pair[0]], Some(&src[pair[1]]), &mut self.ws.packed);
            let target = match dst {
                0 => &mut self.ws.z,
                1 => &mut self.ws.zp,
                _ => &mut self.ws.zd,
            };
            let (lo, hi) = target.split_at_mut(pair[1]);
            unpack_pair(&self.ws.packed, np, &mut lo[pair[0]], &mut hi[0]);
        }
    }

    fn clear_acc(&mut self, groups: usize) {
        for a in self.ws.acc.iter_mut().take(groups) {
            a.iter_mut().for_each(|v| *v = Complex64::default());
        }
    }

    /// Inverse transforms of accumulators `acc[a]` and `acc[b]` added to `x`, `y`.
    fn from_eta_pair_add(&mut self, a: usize, b: usize, x: &mut [f64], y: &mut [f64]) {
        let ws = &mut self.ws;
        for ((o, va), vb) in ws.packed.iter_mut().zip(&ws.acc[a]).zip(&ws.acc[b]) {
            *o = Complex64::new(va.re - vb.im, va.im + vb.re);
        }
        self.sp.from_eta_add(&mut ws.packed, x, y);
    }

    fn apply_full(&mut self, f: &Comps, u: &[f64], out: &mut Comps) {
        let hbar = self.hbar;
        let np = self.grid.np;
        let sym = self.ordering == Ordering::Symmetric;
        self.deriv_x_all(f);
        let dh = std::mem::replace(&mut self.ws.dh, zero_comps(0));
        self.transport_into(&dh, out);
        // Spectra of h, p h and dh/dx.
        self.to_eta_all(f, 0);
        let mut ph = std::mem::replace(&mut self.ws.tmp, zero_comps(0));
        for (pc, fc) in ph.iter_mut().zip(f) {
            for (prow, frow) in pc.chunks_exact_mut(np).zip(fc.chunks_exact(np)) {
                for j in 0..np {
                    prow[j] = self.grid.p(j) * frow[j];
                }
            }
        }
        if sym {
            self.to_eta_all(&ph, 1);
        }
        self.to_eta_all(&dh, 2);
        self.ws.dh = dh;
        // acc[a] plain, acc[4 + a] multiplied by p, acc[8 + a] differentiated.
        self.clear_acc(12);
        self.potential_terms(u);
        let h2 = hbar * hbar;
        {
            let Workspace { z, zp, zd, acc, .. } = &mut self.ws;
            let [km2, km3] = &self.k_minus;
            let [kp2, kp3] = &self.k_plus;
            // R_K contributions: c R_K[z_src] into output a.
            let mut r_term = |c: f64, tm: &ThetaTable, tp: &ThetaTable, src: usize, a: usize| {
                if tm.is_zero() && tp.is_zero() {
                    return;
                }
                if sym {
                    tm.mul_acc(0.5 * c, &z[src], &mut acc[4 + a]);
                    tm.mul_acc(0.5 * c, &zp[src], &mut acc[a]);
                    tp.mul_acc(-0.25 * c, &zd[src], &mut acc[a]);
                    tp.mul_acc(-0.25 * c, &z[src], &mut acc[8 + a]);
                } else {
                    tm.mul_acc(c, &z[src], &mut acc[4 + a]);
                    tp.mul_acc(-0.5 * c, &zd[src], &mut acc[a]);
                }
            };
            r_term(-hbar, km3, kp3, 2, 0);
            r_term(hbar, km2, kp2, 3, 0);
            r_term(-hbar, km3, kp3, 0, 2);
            r_term(hbar, km2, kp2, 0, 3);
            let mut s_term = |c: f64, tm: &ThetaTable, tp: &ThetaTable, src: usize, a: usize| {
                if tm.is_zero() && tp.is_zero() {
                    return;
                }
                if sym {
                    tp.mul_acc(0.5 * c, &z[src], &mut acc[4 + a]);
                    tp.mul_acc(0.5 * c, &zp[src], &mut acc[a]);
                    tm.mul_acc(0.25 * h2 * c, &zd[src], &mut acc[a]);
                    tm.mul_acc(0.25 * h2 * c, &z[src], &mut acc[8 + a]);
                } else {
                    tp.mul_acc(c, &z[src], &mut acc[4 + a]);
                    tm.mul_acc(0.5 * h2 * c, &zd[src], &mut acc[a]);
                }
            };
            s_term(-1.0, km3, kp3, 3, 1);
            s_term(-1.0, km2, kp2, 2, 1);
            s_term(1.0, km2, kp2, 1, 2);
            s_term(1.0, km3, kp3, 1, 3);
            // Zeeman terms.
            let [bm1, bm2, bm3] = &self.b_minus;
            let [bp1, bp2, bp3] = &self.b_plus;
            for (k, bm) in [bm1, bm2, bm3].into_iter().enumerate() {
                if !bm.is_zero() {
                    bm.mul_acc(-hbar, &z[k + 1], &mut acc[0]);
                    bm.mul_acc(-hbar, &z[0], &mut acc[k + 1]);
                }
            }
            // -sum_ij eps_ijk T+_{B_i} f_j
            let eps: [(usize, &ThetaTable, usize, f64); 6] = [
                (1, bp2, 3, -1.0),
                (1, bp3, 2, 1.0),
                (2, bp3, 1, -1.0),
                (2, bp1, 3, 1.0),
                (3, bp1, 2, -1.0),
                (3, bp2, 1, 1.0),
            ];
            for (a, t, src, c) in eps {
                if !t.is_zero() {
                    t.mul_acc(c, &z[src], &mut acc[a]);
                }
            }
        }
        // Back to (x, p): plain groups straight into out; p-groups and
        // d/dx-groups through scratch fields.
        let mut tp = std::mem::replace(&mut self.ws.tmp2, zero_comps(0));
        for c in tp.iter_mut().chain(ph.iter_mut()) {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        {
            let [o0, o1, o2, o3] = out;
            self.from_eta_pair_add(0, 1, o0, o1);
            self.from_eta_pair_add(2, 3, o2, o3);
        }
        {
            let [t0, t1, t2, t3] = &mut tp;
            self.from_eta_pair_add(4, 5, t0, t1);
            self.from_eta_pair_add(6, 7, t2, t3);
            let [q0, q1, q2, q3] = &mut ph;
            self.from_eta_pair_add(8, 9, q0, q1);
            self.from_eta_pair_add(10, 11, q2, q3);
        }
        for (o, t) in out.iter_mut().zip(&tp) {
            for (orow, trow) in o.chunks_exact_mut(np).zip(t.chunks_exact(np)) {
                for j in 0..np {
                    orow[j] += self.grid.p(j) * trow[j];
                }
            }
        }
        if sym {
            let lx = self.grid.x_len;
            let [d0, d1, d2, d3] = &mut tp;
            self.sp.deriv_x(lx, &ph[0], Some(&ph[1]), d0, Some(d1));
            self.sp.deriv_x(lx, &ph[2], Some(&ph[3]), d2, Some(d3));
            for (o, t) in out.iter_mut().zip(&tp) {
                for (a, b) in o.iter_mut().zip(t) {
                    *a += b;
                }
            }
        }
        self.ws.tmp = ph;
        self.ws.tmp2 = tp;
    }

    fn apply_uniform(&mut self, f: &Comps, u: &[f64], out: &mut Comps) {
        let hbar = self.hbar;
        let np = self.grid.np;
        self.deriv_x_all(f);
        let dh = std::mem::replace(&mut self.ws.dh, zero_comps(0));
        self.transport_into(&dh, out);
        self.to_eta_all(f, 0);
        self.clear_acc(4);
        self.potential_terms(u);
        {
            let [o0, o1, o2, o3] = out;
            self.from_eta_pair_add(0, 1, o0, o1);
            self.from_eta_pair_add(2, 3, o2, o3);
        }
        let k = [self.line.k[0][0], self.line.k[1][0], self.line.k[2][0]];
        let b = [self.line.b[0][0], self.line.b[1][0], self.line.b[2][0]];
        for i in 0..self.grid.nx {
            for j in 0..np {
                let n = i * np + j;
                let p = self.grid.p(j);
                let w = [-b[0], -p * k[2] - b[1], p * k[1] - b[2]];
                let h = [f[1][n], f[2][n], f[3][n]];
                out[0][n] += hbar * (k[2] * dh[2][n] - k[1] * dh[3][n]);
                out[1][n] += 2.0 * (w[1] * h[2] - w[2] * h[1]);
                out[2][n] += 2.0 * (w[2] * h[0] - w[0] * h[2]) + hbar * k[2] * dh[0][n];
                out[3][n] += 2.0 * (w[0] * h[1] - w[1] * h[0]) - hbar * k[1] * dh[0][n];
            }
        }
        self.ws.dh = dh;
    }

    fn apply_semiclassical(&mut self, f: &Comps, u: &[f64], out: &mut Comps) {
        let hbar = self.hbar;
        let np = self.grid.np;
        let lp = self.grid.p_len;
        self.deriv_x_all(f);
        let dh = std::mem::replace(&mut self.ws.dh, zero_comps(0));
        self.transport_into(&dh, out);
        let mut dp = std::mem::replace(&mut self.ws.tmp, zero_comps(0));
        {
            let [d0, d1, d2, d3] = &mut dp;
            self.sp.deriv_p(lp, &f[0], Some(&f[1]), d0, Some(d1));
            self.sp.deriv_p(lp, &f[2], Some(&f[3]), d2, Some(d3));
        }
        let l = &self.line;
        for i in 0..self.grid.nx {
            let mut du = l.du0[i];
            for (ui, d) in u.iter().zip(&l.dphi) {
                du += ui * d[i];
            }
            let k = [l.k[0][i], l.k[1][i], l.k[2][i]];
            let dk = [l.dk[0][i], l.dk[1][i], l.dk[2][i]];
            let b = [l.b[0][i], l.b[1][i], l.b[2][i]];
            let db = [l.db[0][i], l.db[1][i], l.db[2][i]];
            for j in 0..np {
                let n = i * np + j;
                let p = self.grid.p(j);
                for c in 0..4 {
                    out[c][n] += du * dp[c][n];
                }
                let w = [-b[0], -p * k[2] - b[1], p * k[1] - b[2]];
                let h = [f[1][n], f[2][n], f[3][n]];
                out[0][n] += hbar
                    * (p * (dk[1] * dp[3][n] - dk[2] * dp[2][n]) + k[2] * dh[2][n] - k[1] * dh[3][n]
                        - db[0] * dp[1][n]
                        - db[1] * dp[2][n]
                        - db[2] * dp[3][n]);
                out[1][n] += 2.0 * (w[1] * h[2] - w[2] * h[1]) - hbar * db[0] * dp[0][n];
                out[2][n] += 2.0 * (w[2] * h[0] - w[0] * h[2])
                    + hbar * (-p * dk[2] * dp[0][n] + k[2] * dh[0][n] - db[1] * dp[0][n]);
                out[3][n] += 2.0 * (w[0] * h[1] - w[1] * h[0])
                    + hbar * (p * dk[1] * dp[0][n] - k[1] * dh[0][n] - db[2] * dp[0][n]);
            }
        }
        self.ws.dh = dh;
        self.ws.tmp = dp;
    }

    pub fn diagnostics(&mut self, f: &WignerState) -> Result<Diagnostics> {
        let m = moments(f)?;
        Ok(Diagnostics {
            time: f.time,
            mass: m.mass,
            l2: f.l2_norm(),
            h1p: h1p_norm_with(f, &mut self.sp),
            mean_x: m.mean_x,
            mean_p: m.mean_p,
            spin: m.spin,
            var_x: m.var_x,
            var_p: m.var_p,
        })
    }
}

/// Scratch states for RK4.
pub struct Stepper {
    k: [Comps; 4],
    y: Comps,
    ua: Vec<f64>,
    um: Vec<f64>,
    ub: Vec<f64>,
}

impl Stepper {
    pub fn new(n: usize, dim: usize) -> Self {
        Stepper {
            k: std::array::from_fn(|_| zero_comps(n)),
            y: zero_comps(n),
            ua: vec![0.0; dim],
            um: vec![0.0; dim],
            ub: vec![0.0; dim],
        }
    }

    /// One RK4 step of size `h` (negative for backward) with controls `ua`,
    /// `um`, `ub` at the start, middle and end of the step.
    fn step(&mut self, gen: &mut Generator, f: &mut Comps, h: f64) {
        let Stepper { k, y, ua, um, ub } = self;
        let combo = |y: &mut Comps, f: &Comps, k: &Comps, c: f64| {
            for ((yc, fc), kc) in y.iter_mut().zip(f).zip(k) {
                for ((yv, fv), kv) in yc.iter_mut().zip(fc).zip(kc) {
                    *yv = fv + c * kv;
                }
            }
        };
        let [k1, k2, k3, k4] = k;
        gen.apply(f, ua, k1);
        combo(y, f, k1, 0.5 * h);
        gen.apply(y, um, k2);
        combo(y, f, k2, 0.5 * h);
        gen.apply(y, um, k3);
        combo(y, f, k3, h);
        gen.apply(y, ub, k4);
        let c = h / 6.0;
        for c4 in 0..4 {
            let (fc, a, b, d, e) = (&mut f[c4], &k1[c4], &k2[c4], &k3[c4], &k4[c4]);
            for n in 0..fc.len() {
                fc[n] += c * (a[n] + 2.0 * (b[n] + d[n]) + e[n]);
            }
        }
    }

    /// Substep `j` of `substeps` on control interval `k`: from `t_k + j h` to
    /// `t_k + (j + 1) h`, or the reverse when `backward`.
    pub fn interval_part(
        &mut self,
        gen: &mut Generator,
        f: &mut Comps,
        u: &ControlSignal,
        k: usize,
        j: usize,
        substeps: usize,
        backward: bool,
    ) {
        let s = substeps.max(1) as f64;
        let h = u.grid.dt() / s;
        let (a, b) = (j as f64 / s, (j + 1) as f64 / s);
        let (t0, t1) = if backward { (b, a) } else { (a, b) };
        u.interp_into(k, t0, &mut self.ua);
        u.interp_into(k, 0.5 * (a + b), &mut self.um);
        u.interp_into(k, t1, &mut self.ub);
        self.step(gen, f, if backward { -h } else { h });
    }

    /// Advance across control interval `k` (forward) or back across it.
    pub fn interval(&mut self, gen: &mut Generator, f: &mut Comps, u: &ControlSignal, k: usize, substeps: usize, backward: bool) {
        let s = substeps.max(1);
        for j in 0..s {
            let j = if backward { s - 1 - j } else { j };
            self.interval_part(gen, f, u, k, j, s, backward);
        }
    }
}

/// RHS of the Wigner system for state `f` under controls `u`.
pub fn rhs(f: &WignerState, fields: &FieldSet, u: &[f64], mass: f64, mode: EvolutionMode) -> Result<WignerState> {
    if u.len() != fields.control_dim() {
        return Err(Error::Dimension {
            what: "control vector",
            expected: fields.control_dim(),
            got: u.len(),
        });
    }
    let mut gen = Generator::new(&f.grid, f.hbar, mass, fields, mode)?;
    let mut out = WignerState::zeros(&f.grid, f.hbar);
    out.time = f.time;
    gen.apply(&f.comps, u, &mut out.comps);
    Ok(out)
}

/// `A+[h]_k` in the ordering `p Theta-_{K_j}[h] - 1/2 Theta+_{K_j}[dh/dx]`.
pub fn a_plus(grid: &PhaseGrid, hbar: f64, fields: &FieldSet, h: &[f64], k: usize) -> Result<Vec<f64>> {
    let (c, j) = match k {
        0 => return Ok(vec![0.0; grid.len()]),
        1 => (-1.0, 2),
        2 => (1.0, 1),
        _ => return Err(Error::Unsupported(format!("axis index {k}"))),
    };
    let r = crate::wigner::moyal_commutator_pk(grid, hbar, |s| fields.rashba_line(j, s), h)?;
    Ok(r.into_iter().map(|v| c * hbar * v).collect())
}

/// `A-[h]_k` in the ordering `p Theta+_{K_j}[h] + hbar^2/2 Theta-_{K_j}[dh/dx]`.
pub fn a_minus(grid: &PhaseGrid, hbar: f64, fields: &FieldSet, h: &[f64], k: usize) -> Result<Vec<f64>> {
    let (c, j) = match k {
        0 => return Ok(vec![0.0; grid.len()]),
        1 => (-1.0, 2),
        2 => (1.0, 1),
        _ => return Err(Error::Unsupported(format!("axis index {k}"))),
    };
    let s = crate::wigner::moyal_anticommutator_pk(grid, hbar, |s| fields.rashba_line(j, s), h)?;
    Ok(s.into_iter().map(|v| c * v).collect())
}

/// Result of a forward integration.
#[derive(Clone, Debug)]
pub struct Evolution {
    pub samples: Vec<WignerState>,
    pub diagnostics: Vec<Diagnostics>,
    pub final_state: WignerState,
}

fn blow_up(f: &Comps) -> bool {
    f.iter().any(|c| c.iter().any(|v| !v.is_finite()))
}

/// RK4 integration over the control horizon with samples every
/// `spec.sample_every` control intervals (and at the final time).
pub fn integrate(f0: &WignerState, u: &ControlSignal, fields: &FieldSet, mass: f64, spec: &EvolutionSpec) -> Result<Evolution> {
    let mut gen = Generator::new(&f0.grid, f0.hbar, mass, fields, spec.mode)?;
    integrate_with(&mut gen, f0, u, spec, |_, _| Ok(()))
}

/// As [`integrate`] with a prebuilt generator and a callback at every control node.
pub fn integrate_with(
    gen: &mut Generator,
    f0: &WignerState,
    u: &ControlSignal,
    spec: &EvolutionSpec,
    mut at_node: impl FnMut(usize, &WignerState) -> Result<()>,
) -> Result<Evolution> {
    if !f0.grid.same_as(&gen.grid) {
        return Err(Error::GridMismatch("initial state and generator grids differ".into()));
    }
    u.check_compatible(&u.grid, gen.control_dim())?;
    let every = spec.sample_every.max(1);
    let mut st = Stepper::new(f0.grid.len(), u.dim);
    let mut f = f0.clone();
    f.time = 0.0;
    let mut samples = vec![f.clone()];
    let mut diagnostics = vec![gen.diagnostics(&f)?];
    at_node(0, &f)?;
    let n = u.grid.intervals;
    for k in 0..n {
        let last_good = f.clone();
        st.interval(gen, &mut f.comps, u, k, spec.substeps, false);
        f.time = u.grid.time(k + 1);
        if blow_up(&f.comps) {
            return Err(Error::WignerBlowUp {
                time: f.time,
                last_good: Box::new(last_good),
            });
        }
        at_node(k + 1, &f)?;
        if (k + 1) % every == 0 || k + 1 == n {
            diagnostics.push(gen.diagnostics(&f)?);
            samples.push(f.clone());
        }
    }
    Ok(Evolution {
        samples,
        diagnostics,
        final_state: f,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::TimeGrid;
    use crate::fields::{ScalarShape, VectorShape};
    use crate::wigner::{coherent_wigner, inner_product};
    use rand::{Rng, SeedableRng};

    fn rashba_fields() -> FieldSet {
        FieldSet {
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
            magnetic: vec![
                VectorShape::Uniform {
                    value: [0.1, 0.2, 0.5],
                },
                VectorShape::Cosine {
                    amplitude: [0.2, -0.1, 0.1],
                    wavevector: [0.8, 0.0, 0.0],
                    phase: 0.3,
                },
            ],
            rashba: vec![VectorShape::Cosine {
                amplitude: [0.1, 0.4, 0.3],
                wavevector: [0.6, 0.0, 0.0],
                phase: 0.1,
            }],
        }
    }

    fn random_state(g: &PhaseGrid, hbar: f64, seed: u64) -> WignerState {
        let mut r = rand::rngs::StdRng::seed_from_u64(seed);
        let mut s = WignerState::zeros(g, hbar);
        for c in 0..4 {
            let a: Vec<f64> = (0..5).map(|_| r.random_range(-1.0..1.0)).collect();
            s.comps[c] = g.field(|x, p| {
                (a[0] + a[1] * x + a[2] * p + a[3] * (a[4] * x * p).cos())
                    * (-(x - 0.3 * a[4]).powi(2) / 1.5 - p * p / 1.2).exp()
            });
        }
        s
    }

    #[test]
    fn generator_is_skew() {
        let g = PhaseGrid::centered(32, 32, 6.0, 6.0).unwrap();
        let f = rashba_fields();
        let mut gen = Generator::new(&g, 0.3, 1.0, &f, EvolutionMode::FullQuantum).unwrap();
        let a = random_state(&g, 0.3, 1);
        let b = random_state(&g, 0.3, 2);
        let mut la = WignerState::zeros(&g, 0.3);
        let mut lb = WignerState::zeros(&g, 0.3);
        gen.apply(&a.comps, &[0.7], &mut la.comps);
        gen.apply(&b.comps, &[0.7], &mut lb.comps);
        let s = inner_product(&la, &b).unwrap() + inner_product(&a, &lb).unwrap();
        let scale = inner_product(&la, &la).unwrap().sqrt() * b.l2_norm();
        assert!(s.abs() < 1e-12 * scale.max(1.0), "{s}");
    }

    #[test]
    fn full_rhs_matches_assembly_from_operators() {
        let g = PhaseGrid::centered(32, 32, 6.0, 6.0).unwrap();
        let f = rashba_fields();
        let hbar = 0.4;
        let st = random_state(&g, hbar, 3);
        let mut gen = Generator::new(&g, hbar, 1.3, &f, EvolutionMode::FullQuantum).unwrap();
        gen.ordering = Ordering::Plain;
        let u = [0.6];
        let mut out = WignerState::zeros(&g, hbar);
        gen.apply(&st.comps, &u, &mut out.comps);

        use crate::wigner::{deriv_x, theta_minus, theta_plus};
        let h = &st.comps;
        let uline = |s: f64| f.potential_line(s) + u[0] * f.control_line(0, s);
        let tr = |c: usize| {
            let d = deriv_x(&g, &h[c]);
            let mut t = theta_minus(&g, hbar, uline, &h[c]).unwrap();
            for i in 0..g.nx {
                for j in 0..g.np {
                    t[i * g.np + j] -= g.p(j) / 1.3 * d[i * g.np + j];
                }
            }
            t
        };
        let bm = |k: usize, c: usize| theta_minus(&g, hbar, |s| f.magnetic_line(k, s), &h[c]).unwrap();
        let bp = |k: usize, c: usize| theta_plus(&g, hbar, |s| f.magnetic_line(k, s), &h[c]).unwrap();
        let ap = |c: usize, k: usize| a_plus(&g, hbar, &f, &h[c], k).unwrap();
        let am = |c: usize, k: usize| a_minus(&g, hbar, &f, &h[c], k).unwrap();
        let n = g.len();
        let mut expect = zero_comps(n);
        let add = |dst: &mut Vec<f64>, src: Vec<f64>, c: f64| {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += c * s;
            }
        };
        for c in 0..4 {
            add(&mut expect[c], tr(c), 1.0);
        }
        for i in 0..3 {
            add(&mut expect[0], ap(i + 1, i), 1.0);
            add(&mut expect[0], bm(i, i + 1), -hbar);
        }
        let eps = |i: usize, j: usize, k: usize| -> f64 {
            match (i, j, k) {
                (0, 1, 2) | (1, 2, 0) | (2, 0, 1) => 1.0,
                (0, 2, 1) | (2, 1, 0) | (1, 0, 2) => -1.0,
                _ => 0.0,
            }
        };
        for k in 0..3 {
            add(&mut expect[k + 1], ap(0, k), 1.0);
            add(&mut expect[k + 1], bm(k, 0), -hbar);
            for i in 0..3 {
                for j in 0..3 {
                    let e = eps(i, j, k);
                    if e != 0.0 {
                        add(&mut expect[k + 1], am(j + 1, i), e);
                        add(&mut expect[k + 1], bp(i, j + 1), -e);
                    }
                }
            }
        }
        for c in 0..4 {
            for idx in 0..n {
                assert!((out.comps[c][idx] - expect[c][idx]).abs() < 1e-10, "comp {c} idx {idx}");
            }
        }
    }

    #[test]
    fn symmetric_and_plain_orderings_agree_on_localized_states() {
        let g = PhaseGrid::centered(128, 128, 7.0, 7.0).unwrap();
        let f = rashba_fields();
        let st = coherent_wigner(&g, 0.3, 0.2, -0.3, 1.0, [0.0, 0.6, 0.8]).unwrap();
        let mut gen = Generator::new(&g, 0.3, 1.0, &f, EvolutionMode::FullQuantum).unwrap();
        let mut a = zero_comps(g.len());
        let mut b = zero_comps(g.len());
        gen.apply(&st.comps, &[0.4], &mut a);
        gen.ordering = Ordering::Plain;
        gen.apply(&st.comps, &[0.4], &mut b);
        let diff: f64 = a.iter().zip(&b).flat_map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v).abs())).fold(0.0, f64::max);
        assert!(diff < 1e-9, "{diff}");
    }

    #[test]
    fn uniform_mode_matches_full_mode_for_constant_fields() {
        let g = PhaseGrid::centered(32, 32, 6.0, 6.0).unwrap();
        let f = FieldSet {
            magnetic: vec![VectorShape::Uniform {
                value: [0.3, -0.2, 0.5],
            }],
            rashba: vec![VectorShape::Uniform {
                value: [0.7, 0.4, -0.3],
            }],
            ..rashba_fields()
        };
        let st = random_state(&g, 0.5, 4);
        let a = rhs(&st, &f, &[0.3], 1.0, EvolutionMode::FullQuantum).unwrap();
        let b = rhs(&st, &f, &[0.3], 1.0, EvolutionMode::UniformField).unwrap();
        for c in 0..4 {
            for (x, y) in a.comps[c].iter().zip(&b.comps[c]) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn uniform_mode_rejects_varying_fields() {
        let g = PhaseGrid::centered(16, 16, 6.0, 6.0).unwrap();
        let st = WignerState::zeros(&g, 0.5);
        assert!(matches!(
            rhs(&st, &rashba_fields(), &[0.0], 1.0, EvolutionMode::UniformField),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_rashba_gives_zero_a_operators() {
        let g = PhaseGrid::centered(16, 16, 6.0, 6.0).unwrap();
        let f = FieldSet {
            rashba: vec![],
            ..rashba_fields()
        };
        let st = random_state(&g, 0.5, 5);
        for k in 0..3 {
            assert!(a_plus(&g, 0.5, &f, &st.comps[0], k).unwrap().iter().all(|v| *v == 0.0));
            assert!(a_minus(&g, 0.5, &f, &st.comps[0], k).unwrap().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn semiclassical_mode_differs_at_second_order() {
        let f = rashba_fields();
        let mut errs = vec![];
        for hbar in [0.4f64, 0.2, 0.1] {
            let g = PhaseGrid::centered(128, 128, 7.0, 7.0).unwrap();
            // Fixed smooth state, independent of hbar.
            let st = {
                let mut s = random_state(&g, hbar, 9);
                s.hbar = hbar;
                s
            };
            let a = rhs(&st, &f, &[0.5], 1.0, EvolutionMode::FullQuantum).unwrap();
            let b = rhs(&st, &f, &[0.5], 1.0, EvolutionMode::Semiclassical).unwrap();
            let mut d = a.clone();
            d.axpy(-1.0, &b);
            errs.push(d.l2_norm());
        }
        for w in errs.windows(2) {
            let slope = (w[0] / w[1]).log2();
            assert!((slope - 2.0).abs() < 0.1, "slope {slope} from {errs:?}");
        }
    }

    #[test]
    fn free_streaming_matches_spectral_shift() {
        let g = PhaseGrid::centered(128, 64, 8.0, 7.0).unwrap();
        let fields = FieldSet {
            controls: vec![ScalarShape::Constant { value: 0.0 }],
            ..Default::default()
        };
        let st = coherent_wigner(&g, 0.5, -1.0, 0.8, 1.0, [1.0, 0.0, 0.0]).unwrap();
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let u = ControlSignal::zeros(grid, 1);
        let spec = EvolutionSpec {
            substeps: 4,
            ..Default::default()
        };
        let ev = integrate(&st, &u, &fields, 1.0, &spec).unwrap();
        let m = ev.diagnostics.last().unwrap();
        assert!((m.mean_x - (-1.0 + 0.8)).abs() < 1e-10, "{m:?}");
        assert!((m.mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nan_input_aborts_with_last_good_state() {
        let g = PhaseGrid::centered(32, 32, 6.0, 6.0).unwrap();
        let fields = rashba_fields();
        let st = coherent_wigner(&g, 1.0, 0.0, 0.0, 1.0, [1.0, 0.0, 0.0]).unwrap();
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let mut u = ControlSignal::zeros(grid, 1);
        u.values[3] = f64::INFINITY;
        // Non-finite controls are rejected up front.
        assert!(integrate(&st, &u, &fields, 1.0, &EvolutionSpec::default()).is_err());
        u.values[3] = 1e300;
        match integrate(&st, &u, &fields, 1.0, &EvolutionSpec::default()) {
            Err(Error::WignerBlowUp { last_good, time }) => {
                assert!(last_good.is_finite());
                assert!(time > 0.0);
            }
            other => panic!("expected blow-up, got {:?}", other.map(|_| ())),
        }
    }
}
