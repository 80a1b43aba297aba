//! FFT plumbing on a row-major `nx x np` array (`p` is the fast index).
//!
//! Real fields are transformed two at a time by packing them into the real and
//! imaginary parts of one complex array; every multiplier used here maps real
//! fields to real fields, so the two results separate again afterwards.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

pub struct Spectral {
    pub nx: usize,
    pub np: usize,
    p_fwd: Arc<dyn Fft<f64>>,
    p_inv: Arc<dyn Fft<f64>>,
    x_fwd: Arc<dyn Fft<f64>>,
    x_inv: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
    col: Vec<Complex64>,
}

/// Signed frequency index in FFT order; the Nyquist index maps to `n/2`.
pub fn signed_index(k: usize, n: usize) -> isize {
    if k <= n / 2 {
        k as isize
    } else {
        k as isize - n as isize
    }
}

impl Spectral {
    pub fn new(nx: usize, np: usize) -> Self {
        let mut planner = FftPlanner::new();
        let p_fwd = planner.plan_fft_forward(np);
        let p_inv = planner.plan_fft_inverse(np);
        let x_fwd = planner.plan_fft_forward(nx);
        let x_inv = planner.plan_fft_inverse(nx);
        let len = [&p_fwd, &p_inv, &x_fwd, &x_inv]
            .iter()
            .map(|f| f.get_inplace_scratch_len())
            .max()
            .unwrap();
        Spectral {
            nx,
            np,
            p_fwd,
            p_inv,
            x_fwd,
            x_inv,
            scratch: vec![Complex64::default(); len],
            col: vec![Complex64::default(); nx * np],
        }
    }

    pub fn len(&self) -> usize {
        self.nx * self.np
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `out = sum_l (a + i b)_l e^{+2 pi i k l / np}` along every row.
    pub fn to_eta(&mut self, a: &[f64], b: Option<&[f64]>, out: &mut [Complex64]) {
        match b {
            Some(b) => {
                for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
                    *o = Complex64::new(x, y);
                }
            }
            None => {
                for (o, &x) in out.iter_mut().zip(a) {
                    *o = Complex64::new(x, 0.0);
                }
            }
        }
        self.p_inv.process_with_scratch(out, &mut self.scratch);
    }

    /// Inverse of `to_eta`, writing real and imaginary parts.
    pub fn from_eta(&mut self, z: &mut [Complex64], a: &mut [f64], b: Option<&mut [f64]>) {
        self.p_fwd.process_with_scratch(z, &mut self.scratch);
        let s = 1.0 / self.np as f64;
        match b {
            Some(b) => {
                for ((v, x), y) in z.iter().zip(a.iter_mut()).zip(b.iter_mut()) {
                    *x = v.re * s;
                    *y = v.im * s;
                }
            }
            None => {
                for (v, x) in z.iter().zip(a.iter_mut()) {
                    *x = v.re * s;
                }
            }
        }
    }

    /// Like `from_eta` but accumulates `a += re`, `b += im`.
    pub fn from_eta_add(&mut self, z: &mut [Complex64], a: &mut [f64], b: &mut [f64]) {
        self.p_fwd.process_with_scratch(z, &mut self.scratch);
        let s = 1.0 / self.np as f64;
        for ((v, x), y) in z.iter().zip(a.iter_mut()).zip(b.iter_mut()) {
            *x += v.re * s;
            *y += v.im * s;
        }
    }

    /// Spectral d/dx of up to two real fields (period `lx`), Nyquist mode zeroed.
    pub fn deriv_x(&mut self, lx: f64, a: &[f64], b: Option<&[f64]>, da: &mut [f64], db: Option<&mut [f64]>) {
        let (nx, np) = (self.nx, self.np);
        // Transpose so that x becomes the contiguous index.
        for i in 0..nx {
            for j in 0..np {
                let im = b.map_or(0.0, |b| b[i * np + j]);
                self.col[j * nx + i] = Complex64::new(a[i * np + j], im);
            }
        }
        self.x_fwd.process_with_scratch(&mut self.col, &mut self.scratch);
        let w = 2.0 * std::f64::consts::PI / lx;
        let s = 1.0 / nx as f64;
        for row in self.col.chunks_exact_mut(nx) {
            for (k, v) in row.iter_mut().enumerate() {
                let m = if 2 * k == nx {
                    0.0
                } else {
                    signed_index(k, nx) as f64 * w * s
                };
                *v = Complex64::new(-v.im * m, v.re * m);
            }
        }
        self.x_inv.process_with_scratch(&mut self.col, &mut self.scratch);
        match db {
            Some(db) => {
                for i in 0..nx {
                    for j in 0..np {
                        let v = self.col[j * nx + i];
                        da[i * np + j] = v.re;
                        db[i * np + j] = v.im;
                    }
                }
            }
            None => {
                for i in 0..nx {
                    for j in 0..np {
                        da[i * np + j] = self.col[j * nx + i].re;
                    }
                }
            }
        }
    }

    /// Spectral d/dp of up to two real fields (period `lp`), Nyquist mode zeroed.
    pub fn deriv_p(&mut self, lp: f64, a: &[f64], b: Option<&[f64]>, da: &mut [f64], db: Option<&mut [f64]>) {
        let np = self.np;
        let mut z: Vec<Complex64> = match b {
            Some(b) => a.iter().zip(b).map(|(&x, &y)| Complex64::new(x, y)).collect(),
            None => a.iter().map(|&x| Complex64::new(x, 0.0)).collect(),
        };
        self.p_fwd.process_with_scratch(&mut z, &mut self.scratch);
        let w = 2.0 * std::f64::consts::PI / lp;
        let s = 1.0 / np as f64;
        for row in z.chunks_exact_mut(np) {
            for (k, v) in row.iter_mut().enumerate() {
                let m = if 2 * k == np {
                    0.0
                } else {
                    signed_index(k, np) as f64 * w * s
                };
                *v = Complex64::new(-v.im * m, v.re * m);
            }
        }
        self.p_inv.process_with_scratch(&mut z, &mut self.scratch);
        match db {
            Some(db) => {
                for ((v, x), y) in z.iter().zip(da.iter_mut()).zip(db.iter_mut()) {
                    *x = v.re;
                    *y = v.im;
                }
            }
            None => {
                for (v, x) in z.iter().zip(da.iter_mut()) {
                    *x = v.re;
                }
            }
        }
    }
}
