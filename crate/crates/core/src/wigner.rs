//! Phase-space grid, Pauli-component Wigner states, and the spectral
//! pseudo-differential operators `Theta-` and `Theta+`.
//!
//! The transform in `p` uses the kernel `e^{-i p eta}`. For a field `F` and a
//! multiplier `M(x, eta)`:
//!
//! ```text
//! Theta[F](x, p_j) = 1/N sum_k M(x, eta_k) e^{-i eta_k p_j} sum_l F(x, p_l) e^{+i eta_k p_l}
//! ```
//!
//! with `eta_k` in FFT order. The Nyquist column uses the average of the two
//! band-edge values, which is zero for `Theta-` and `delta+ V(eta_N)` for `Theta+`.

use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{signed_index, Spectral};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseGrid {
    pub nx: usize,
    pub np: usize,
    pub x_min: f64,
    pub x_len: f64,
    pub p_min: f64,
    pub p_len: f64,
}

impl PhaseGrid {
    pub fn new(nx: usize, np: usize, x_min: f64, x_len: f64, p_min: f64, p_len: f64) -> Result<Self> {
        let g = PhaseGrid {
            nx,
            np,
            x_min,
            x_len,
            p_min,
            p_len,
        };
        let errs = g.validate();
        if errs.is_empty() {
            Ok(g)
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Grid on `[-hx, hx) x [-hp, hp)`.
    pub fn centered(nx: usize, np: usize, hx: f64, hp: f64) -> Result<Self> {
        Self::new(nx, np, -hx, 2.0 * hx, -hp, 2.0 * hp)
    }

    pub fn validate(&self) -> Vec<String> {
        let mut e = Vec::new();
        for (name, n) in [("grid.nx", self.nx), ("grid.np", self.np)] {
            if n < 4 || !n.is_power_of_two() {
                e.push(format!("{name} must be a power of two >= 4 (got {n})"));
            }
        }
        if !(self.x_len > 0.0) || !self.x_min.is_finite() {
            e.push(format!("grid.x_len must be positive (got {})", self.x_len));
        }
        if !(self.p_len > 0.0) || !self.p_min.is_finite() {
            e.push(format!("grid.p_len must be positive (got {})", self.p_len));
        }
        e
    }

    pub fn len(&self) -> usize {
        self.nx * self.np
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dx(&self) -> f64 {
        self.x_len / self.nx as f64
    }

    pub fn dp(&self) -> f64 {
        self.p_len / self.np as f64
    }

    pub fn cell(&self) -> f64 {
        self.dx() * self.dp()
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x_min + i as f64 * self.dx()
    }

    pub fn p(&self, j: usize) -> f64 {
        self.p_min + j as f64 * self.dp()
    }

    /// Dual variable of `p` in FFT order; the Nyquist index gives `+eta_N`.
    pub fn eta(&self, k: usize) -> f64 {
        signed_index(k, self.np) as f64 * 2.0 * std::f64::consts::PI / self.p_len
    }

    /// Dual variable of `x` in FFT order.
    pub fn mu(&self, k: usize) -> f64 {
        signed_index(k, self.nx) as f64 * 2.0 * std::f64::consts::PI / self.x_len
    }

    pub fn x_max(&self) -> f64 {
        self.x_min + self.x_len
    }

    pub fn p_max(&self) -> f64 {
        self.p_min + self.p_len
    }

    pub fn same_as(&self, other: &PhaseGrid) -> bool {
        self == other
    }

    pub fn field(&self, mut f: impl FnMut(f64, f64) -> f64) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        for i in 0..self.nx {
            let x = self.x(i);
            for j in 0..self.np {
                v.push(f(x, self.p(j)));
            }
        }
        v
    }

    pub fn spectral(&self) -> Spectral {
        Spectral::new(self.nx, self.np)
    }
}

/// Matrix Wigner function `f = f0 sigma_0 + sum_i f_i sigma_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct WignerState {
    pub grid: PhaseGrid,
    pub hbar: f64,
    pub time: f64,
    pub comps: [Vec<f64>; 4],
}

impl WignerState {
    pub fn zeros(grid: &PhaseGrid, hbar: f64) -> Self {
        let n = grid.len();
        WignerState {
            grid: grid.clone(),
            hbar,
            time: 0.0,
            comps: [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]],
        }
    }

    pub fn f0(&self) -> &[f64] {
        &self.comps[0]
    }

    pub fn is_finite(&self) -> bool {
        self.comps.iter().all(|c| c.iter().all(|v| v.is_finite()))
    }

    pub fn axpy(&mut self, a: f64, other: &WignerState) {
        for (c, o) in self.comps.iter_mut().zip(&other.comps) {
            for (y, x) in c.iter_mut().zip(o) {
                *y += a * x;
            }
        }
    }

    pub fn scale(&mut self, a: f64) {
        self.comps.iter_mut().flatten().for_each(|v| *v *= a);
    }

    pub fn check_same_grid(&self, other: &WignerState) -> Result<()> {
        if self.grid.same_as(&other.grid) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!("{:?} vs {:?}", self.grid, other.grid)))
        }
    }

    pub fn l2_norm(&self) -> f64 {
        inner_product_unchecked(self, self).sqrt()
    }

    const MAGIC: [u8; 4] = *b"SPWG";
    const VERSION: u32 = 1;

    /// Header `SPWG`, version (u32), `nx`, `np` (u64), `x_min`, `x_len`,
    /// `p_min`, `p_len`, `hbar`, `time` (f64), then `f0, f1, f2, f3` row-major.
    /// Little-endian throughout.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&Self::MAGIC)?;
        w.write_all(&Self::VERSION.to_le_bytes())?;
        w.write_all(&(self.grid.nx as u64).to_le_bytes())?;
        w.write_all(&(self.grid.np as u64).to_le_bytes())?;
        let g = &self.grid;
        for v in [g.x_min, g.x_len, g.p_min, g.p_len, self.hbar, self.time] {
            w.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(8 * g.len());
        for c in &self.comps {
            buf.clear();
            for v in c {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        if b4 != Self::MAGIC {
            return Err(Error::config("not a Wigner snapshot (bad magic)"));
        }
        r.read_exact(&mut b4)?;
        if u32::from_le_bytes(b4) != Self::VERSION {
            return Err(Error::config("unsupported snapshot version"));
        }
        let mut next_u64 = |r: &mut R| -> Result<u64> {
            r.read_exact(&mut b8)?;
            Ok(u64::from_le_bytes(b8))
        };
        let nx = next_u64(&mut r)? as usize;
        let np = next_u64(&mut r)? as usize;
        let mut vals = [0.0; 6];
        for v in vals.iter_mut() {
            *v = f64::from_bits(next_u64(&mut r)?);
        }
        let grid = PhaseGrid::new(nx, np, vals[0], vals[1], vals[2], vals[3])?;
        let mut s = WignerState::zeros(&grid, vals[4]);
        s.time = vals[5];
        let mut buf = vec![0u8; 8 * grid.len()];
        for c in s.comps.iter_mut() {
            r.read_exact(&mut buf)?;
            for (v, chunk) in c.iter_mut().zip(buf.chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        Ok(s)
    }

    pub fn save_binary(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_binary(std::io::BufWriter::new(f))
    }

    pub fn load_binary(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_binary(std::io::BufReader::new(f))
    }

    /// Columns `x,p,f0,f1,f2,f3`; intended for small grids.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "x,p,f0,f1,f2,f3")?;
        for i in 0..self.grid.nx {
            for j in 0..self.grid.np {
                let n = i * self.grid.np + j;
                writeln!(
                    w,
                    "{},{},{},{},{},{}",
                    crate::io::fmt17(self.grid.x(i)),
                    crate::io::fmt17(self.grid.p(j)),
                    crate::io::fmt17(self.comps[0][n]),
                    crate::io::fmt17(self.comps[1][n]),
                    crate::io::fmt17(self.comps[2][n]),
                    crate::io::fmt17(self.comps[3][n]),
                )?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThetaSign {
    Minus,
    Plus,
}

/// Tabulated multiplier of `Theta-` (stored as `a` with `delta- = -i a`) or of
/// `Theta+` (stored as `delta+` itself), indexed `[x][eta]`.
#[derive(Clone, Debug)]
pub struct ThetaTable {
    pub sign: ThetaSign,
    pub data: Vec<f64>,
}

impl ThetaTable {
    pub fn new(grid: &PhaseGrid, hbar: f64, sign: ThetaSign, v: impl Fn(f64) -> f64) -> Self {
        let mut data = vec![0.0; grid.len()];
        for i in 0..grid.nx {
            let x = grid.x(i);
            for k in 0..grid.np {
                let s = 0.5 * hbar * grid.eta(k);
                let val = match sign {
                    ThetaSign::Minus if 2 * k == grid.np => 0.0,
                    ThetaSign::Minus => (v(x + s) - v(x - s)) / hbar,
                    ThetaSign::Plus => v(x + s) + v(x - s),
                };
                data[i * grid.np + k] = val;
            }
        }
        ThetaTable { sign, data }
    }

    pub fn zeros(grid: &PhaseGrid, sign: ThetaSign) -> Self {
        ThetaTable {
            sign,
            data: vec![0.0; grid.len()],
        }
    }

    /// `self += c * other` (signs must agree).
    pub fn add_scaled(&mut self, c: f64, other: &ThetaTable) {
        debug_assert_eq!(self.sign, other.sign);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    /// `acc += c * M * z` pointwise in `(x, eta)`.
    #[inline]
    pub fn mul_acc(&self, c: f64, z: &[Complex64], acc: &mut [Complex64]) {
        match self.sign {
            ThetaSign::Minus => {
                for ((o, v), &a) in acc.iter_mut().zip(z).zip(&self.data) {
                    let m = c * a;
                    o.re += v.im * m;
                    o.im -= v.re * m;
                }
            }
            ThetaSign::Plus => {
                for ((o, v), &b) in acc.iter_mut().zip(z).zip(&self.data) {
                    let m = c * b;
                    o.re += v.re * m;
                    o.im += v.im * m;
                }
            }
        }
    }

    /// Apply to one or two real fields.
    pub fn apply(&self, sp: &mut Spectral, f: &[f64], g: Option<&[f64]>, out_f: &mut [f64], out_g: Option<&mut [f64]>) {
        let n = f.len();
        let mut z = vec![Complex64::default(); n];
        sp.to_eta(f, g, &mut z);
        let mut acc = vec![Complex64::default(); n];
        self.mul_acc(1.0, &z, &mut acc);
        sp.from_eta(&mut acc, out_f, out_g);
    }
}

fn check_len(grid: &PhaseGrid, f: &[f64]) -> Result<()> {
    if f.len() != grid.len() {
        return Err(Error::Dimension {
            what: "grid field",
            expected: grid.len(),
            got: f.len(),
        });
    }
    Ok(())
}

/// `Theta-_V[f]` with multiplier `(1/i hbar)[V(x + hbar eta/2) - V(x - hbar eta/2)]`.
pub fn theta_minus(grid: &PhaseGrid, hbar: f64, v: impl Fn(f64) -> f64, f: &[f64]) -> Result<Vec<f64>> {
    check_len(grid, f)?;
    let t = ThetaTable::new(grid, hbar, ThetaSign::Minus, v);
    let mut out = vec![0.0; grid.len()];
    t.apply(&mut grid.spectral(), f, None, &mut out, None);
    Ok(out)
}

/// `Theta+_V[f]` with multiplier `V(x + hbar eta/2) + V(x - hbar eta/2)`.
pub fn theta_plus(grid: &PhaseGrid, hbar: f64, v: impl Fn(f64) -> f64, f: &[f64]) -> Result<Vec<f64>> {
    check_len(grid, f)?;
    let t = ThetaTable::new(grid, hbar, ThetaSign::Plus, v);
    let mut out = vec![0.0; grid.len()];
    t.apply(&mut grid.spectral(), f, None, &mut out, None);
    Ok(out)
}

pub fn deriv_x(grid: &PhaseGrid, f: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; grid.len()];
    grid.spectral().deriv_x(grid.x_len, f, None, &mut out, None);
    out
}

pub fn deriv_p(grid: &PhaseGrid, f: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; grid.len()];
    grid.spectral().deriv_p(grid.p_len, f, None, &mut out, None);
    out
}

/// Pointwise `p f`.
pub fn times_p(grid: &PhaseGrid, f: &[f64]) -> Vec<f64> {
    let mut out = f.to_vec();
    for row in out.chunks_exact_mut(grid.np) {
        for (j, v) in row.iter_mut().enumerate() {
            *v *= grid.p(j);
        }
    }
    out
}

/// `[pK, g]_# = i hbar R`; returns `R = p Theta-_K[g] - 1/2 Theta+_K[dg/dx]`.
pub fn moyal_commutator_pk(grid: &PhaseGrid, hbar: f64, k: impl Fn(f64) -> f64 + Copy, g: &[f64]) -> Result<Vec<f64>> {
    let a = times_p(grid, &theta_minus(grid, hbar, k, g)?);
    let b = theta_plus(grid, hbar, k, &deriv_x(grid, g))?;
    Ok(a.iter().zip(&b).map(|(a, b)| a - 0.5 * b).collect())
}

/// `{pK, g}_# = p Theta+_K[g] + hbar^2/2 Theta-_K[dg/dx]`.
pub fn moyal_anticommutator_pk(grid: &PhaseGrid, hbar: f64, k: impl Fn(f64) -> f64 + Copy, g: &[f64]) -> Result<Vec<f64>> {
    let a = times_p(grid, &theta_plus(grid, hbar, k, g)?);
    let b = theta_minus(grid, hbar, k, &deriv_x(grid, g))?;
    Ok(a.iter().zip(&b).map(|(a, b)| a + 0.5 * hbar * hbar * b).collect())
}

fn inner_product_unchecked(f: &WignerState, h: &WignerState) -> f64 {
    let mut s = 0.0;
    for (a, b) in f.comps.iter().zip(&h.comps) {
        s += a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    }
    s * f.grid.cell()
}

/// `<f, h> = 1/2 tr int f^dagger h = int (f0 h0 + f . h) dx dp`.
pub fn inner_product(f: &WignerState, h: &WignerState) -> Result<f64> {
    f.check_same_grid(h)?;
    Ok(inner_product_unchecked(f, h))
}

/// `(sum_i int (1 + p^2) f_i^2 + (df_i/dx)^2 + (df_i/dp)^2)^{1/2}`.
pub fn h1p_norm(f: &WignerState) -> f64 {
    let g = &f.grid;
    let mut sp = g.spectral();
    h1p_norm_with(f, &mut sp)
}

pub(crate) fn h1p_norm_with(f: &WignerState, sp: &mut Spectral) -> f64 {
    let g = &f.grid;
    let n = g.len();
    let mut dx = [vec![0.0; n], vec![0.0; n]];
    let mut dp = [vec![0.0; n], vec![0.0; n]];
    let mut total = 0.0;
    for pair in [[0, 1], [2, 3]] {
        let (a, b) = (&f.comps[pair[0]], &f.comps[pair[1]]);
        let [dxa, dxb] = &mut dx;
        sp.deriv_x(g.x_len, a, Some(b), dxa, Some(dxb));
        let [dpa, dpb] = &mut dp;
        sp.deriv_p(g.p_len, a, Some(b), dpa, Some(dpb));
        for (c, comp) in [a, b].into_iter().enumerate() {
            for i in 0..g.nx {
                for j in 0..g.np {
                    let idx = i * g.np + j;
                    let p = g.p(j);
                    total += (1.0 + p * p) * comp[idx] * comp[idx]
                        + dx[c][idx] * dx[c][idx]
                        + dp[c][idx] * dp[c][idx];
                }
            }
        }
    }
    (total * g.cell()).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mass: f64,
    pub mean_x: f64,
    pub mean_p: f64,
    pub spin: [f64; 3],
    pub var_x: f64,
    pub var_p: f64,
}

pub fn moments(f: &WignerState) -> Result<Moments> {
    let g = &f.grid;
    let c = g.cell();
    let f0 = &f.comps[0];
    let mass = 2.0 * c * f0.iter().sum::<f64>();
    if !(mass.abs() > 1e-12) {
        return Err(Error::Degenerate(format!("state mass {mass} is too small for moments")));
    }
    let (mut sx, mut sp, mut sxx, mut spp) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..g.nx {
        let x = g.x(i);
        for j in 0..g.np {
            let p = g.p(j);
            let w = f0[i * g.np + j];
            sx += x * w;
            sp += p * w;
            sxx += x * x * w;
            spp += p * p * w;
        }
    }
    let k = 2.0 * c / mass;
    let mean_x = sx * k;
    let mean_p = sp * k;
    let spin = [1, 2, 3].map(|i| 2.0 * c * f.comps[i].iter().sum::<f64>() / mass);
    Ok(Moments {
        mass,
        mean_x,
        mean_p,
        spin,
        var_x: sxx * k - mean_x * mean_x,
        var_p: spp * k - mean_p * mean_p,
    })
}

/// Standard deviations `(sx, sp)` of the coherent state of width `sigma`.
pub fn coherent_widths(hbar: f64, sigma: f64) -> (f64, f64) {
    ((hbar * sigma * sigma / 2.0).sqrt(), (hbar / (2.0 * sigma * sigma)).sqrt())
}

/// Wigner function of a Gaussian wave packet with spin expectation `d`.
pub fn coherent_wigner(
    grid: &PhaseGrid,
    hbar: f64,
    xbar: f64,
    pbar: f64,
    sigma: f64,
    d: [f64; 3],
) -> Result<WignerState> {
    let mut errs = grid.validate();
    if !(hbar > 0.0) {
        errs.push(format!("hbar must be positive (got {hbar})"));
    }
    if !(sigma > 0.0) {
        errs.push(format!("sigma must be positive (got {sigma})"));
    }
    let dn = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if dn > 1.0 + 1e-12 {
        errs.push(format!("spin vector must satisfy |d| <= 1 (got {dn})"));
    }
    if errs.is_empty() {
        errs.extend(envelope_violations(grid, hbar, sigma, xbar, pbar));
    }
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let (sx, sp) = coherent_widths(hbar, sigma);
    let norm = 1.0 / (2.0 * std::f64::consts::PI * sx * sp);
    let g = grid.field(|x, p| {
        norm * (-(x - xbar).powi(2) / (2.0 * sx * sx) - (p - pbar).powi(2) / (2.0 * sp * sp)).exp()
    });
    let mut s = WignerState::zeros(grid, hbar);
    s.comps[0] = g.iter().map(|v| 0.5 * v).collect();
    for i in 0..3 {
        s.comps[i + 1] = g.iter().map(|v| 0.5 * d[i] * v).collect();
    }
    Ok(s)
}

/// Six-sigma containment and a minimum of 1.5 nodes per standard deviation.
pub fn envelope_violations(grid: &PhaseGrid, hbar: f64, sigma: f64, xbar: f64, pbar: f64) -> Vec<String> {
    let (sx, sp) = coherent_widths(hbar, sigma);
    let mut e = Vec::new();
    let fits = |c: f64, s: f64, lo: f64, len: f64| c - 6.0 * s >= lo && c + 6.0 * s <= lo + len;
    if !fits(xbar, sx, grid.x_min, grid.x_len) {
        let need = 2.0 * ((xbar - grid.x_min).abs().max((grid.x_max() - xbar).abs()).max(6.0 * sx));
        e.push(format!(
            "envelope exceeds box in x: [{}, {}] does not contain x = {xbar} +- 6 x {sx:.4}; suggested grid.x_len >= {need:.4} centered on the packet",
            grid.x_min,
            grid.x_max()
        ));
    }
    if !fits(pbar, sp, grid.p_min, grid.p_len) {
        let need = 2.0 * (pbar.abs() + 6.0 * sp);
        e.push(format!(
            "envelope exceeds box in p: [{}, {}] does not contain p = {pbar} +- 6 x {sp:.4}; suggested grid.p_len >= {need:.4}",
            grid.p_min,
            grid.p_max()
        ));
    }
    if sx < 1.5 * grid.dx() {
        e.push(format!(
            "grid too coarse in x: position width {sx:.4} < 1.5 dx = {:.4}; raise grid.nx",
            1.5 * grid.dx()
        ));
    }
    if sp < 1.5 * grid.dp() {
        e.push(format!(
            "grid too coarse in p: momentum width {sp:.4} < 1.5 dp = {:.4}; raise grid.np",
            1.5 * grid.dp()
        ));
    }
    e
}
