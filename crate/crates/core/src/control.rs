//! Time grids and piecewise-linear control signals.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub intervals: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, intervals: usize) -> Result<Self> {
        if !(horizon > 0.0) || intervals == 0 {
            return Err(Error::config(format!(
                "time grid needs T > 0 and at least one interval (T = {horizon}, N = {intervals})"
            )));
        }
        Ok(TimeGrid { horizon, intervals })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.intervals as f64
    }

    pub fn nodes(&self) -> usize {
        self.intervals + 1
    }

    pub fn time(&self, k: usize) -> f64 {
        self.horizon * k as f64 / self.intervals as f64
    }

    /// Trapezoid weight of node `k`.
    pub fn weight(&self, k: usize) -> f64 {
        if k == 0 || k == self.intervals {
            0.5 * self.dt()
        } else {
            self.dt()
        }
    }
}

/// Node values `u_i(t_k)` stored node-major; linear in between.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlSignal {
    pub grid: TimeGrid,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl ControlSignal {
    pub fn zeros(grid: TimeGrid, dim: usize) -> Self {
        ControlSignal {
            grid,
            dim,
            values: vec![0.0; grid.nodes() * dim],
        }
    }

    pub fn from_fn(grid: TimeGrid, dim: usize, mut f: impl FnMut(f64, usize) -> f64) -> Self {
        let mut s = Self::zeros(grid, dim);
        for k in 0..grid.nodes() {
            let t = grid.time(k);
            for i in 0..dim {
                s.values[k * dim + i] = f(t, i);
            }
        }
        s
    }

    pub fn node(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn node_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn get(&self, k: usize, i: usize) -> f64 {
        self.values[k * self.dim + i]
    }

    /// Linear interpolation inside interval `k` at fraction `theta` in `[0, 1]`.
    pub fn interp_into(&self, k: usize, theta: f64, out: &mut [f64]) {
        let k = k.min(self.grid.intervals - 1);
        let a = self.node(k);
        let b = self.node(k + 1);
        for i in 0..self.dim {
            out[i] = a[i] + theta * (b[i] - a[i]);
        }
    }

    pub fn at_time(&self, t: f64) -> Vec<f64> {
        let s = (t / self.grid.dt()).clamp(0.0, self.grid.intervals as f64);
        let k = (s.floor() as usize).min(self.grid.intervals - 1);
        let mut out = vec![0.0; self.dim];
        self.interp_into(k, s - k as f64, &mut out);
        out
    }

    /// Three-point second difference with the natural closure
    /// `u''(0) = 2(u_1 - u_0)/dt^2` (and likewise at `T`).
    pub fn second_derivative(&self) -> ControlSignal {
        let n = self.grid.intervals;
        let h2 = self.grid.dt().powi(2);
        let mut out = ControlSignal::zeros(self.grid, self.dim);
        for i in 0..self.dim {
            for k in 0..=n {
                let v = if n == 0 {
                    0.0
                } else if k == 0 {
                    2.0 * (self.get(1, i) - self.get(0, i)) / h2
                } else if k == n {
                    2.0 * (self.get(n - 1, i) - self.get(n, i)) / h2
                } else {
                    (self.get(k - 1, i) - 2.0 * self.get(k, i) + self.get(k + 1, i)) / h2
                };
                out.values[k * self.dim + i] = v;
            }
        }
        out
    }

    /// Trapezoid-weighted inner product over `[0, T]`.
    pub fn dot(&self, other: &ControlSignal) -> f64 {
        let mut s = 0.0;
        for k in 0..self.grid.nodes() {
            let w = self.grid.weight(k);
            for i in 0..self.dim {
                s += w * self.get(k, i) * other.get(k, i);
            }
        }
        s
    }

    pub fn l2_norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn axpy(&mut self, a: f64, x: &ControlSignal) {
        for (y, xv) in self.values.iter_mut().zip(&x.values) {
            *y += a * xv;
        }
    }

    pub fn scaled(&self, a: f64) -> ControlSignal {
        let mut s = self.clone();
        s.values.iter_mut().for_each(|v| *v *= a);
        s
    }

    pub fn sub(&self, other: &ControlSignal) -> ControlSignal {
        let mut s = self.clone();
        s.axpy(-1.0, other);
        s
    }

    pub fn check_compatible(&self, grid: &TimeGrid, dim: usize) -> Result<()> {
        if self.dim != dim {
            return Err(Error::Dimension {
                what: "control dimension",
                expected: dim,
                got: self.dim,
            });
        }
        if self.grid.intervals != grid.intervals
            || (self.grid.horizon - grid.horizon).abs() > 1e-12 * grid.horizon
        {
            return Err(Error::Dimension {
                what: "control time nodes",
                expected: grid.nodes(),
                got: self.grid.nodes(),
            });
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("control contains non-finite values"));
        }
        Ok(())
    }
}

/// `k(u) = gamma/2 int |u|^2 + gamma'/2 int |u'|^2` with the trapezoid rule for
/// the first term and interval differences for the second. Its node gradient,
/// divided by the trapezoid weights, is exactly `gamma u - gamma' u''`.
pub fn regularization_cost(u: &ControlSignal, gamma: f64, gamma_prime: f64) -> f64 {
    let dt = u.grid.dt();
    let mut c = 0.5 * gamma * u.dot(u);
    if gamma_prime != 0.0 {
        let mut s = 0.0;
        for k in 0..u.grid.intervals {
            for i in 0..u.dim {
                let d = u.get(k + 1, i) - u.get(k, i);
                s += d * d;
            }
        }
        c += 0.5 * gamma_prime * s / dt;
    }
    c
}

/// Solve `gamma' u'' - gamma u = rhs` with natural boundary conditions.
pub fn solve_control_bvp(rhs: &ControlSignal, gamma: f64, gamma_prime: f64) -> Result<ControlSignal> {
    if gamma < 0.0 || gamma_prime < 0.0 || (gamma == 0.0 && gamma_prime == 0.0) {
        return Err(Error::Degenerate(format!(
            "regularization weights must be nonnegative and not both zero (gamma = {gamma}, gamma' = {gamma_prime})"
        )));
    }
    if gamma == 0.0 {
        return Err(Error::Degenerate(
            "gamma = 0 leaves constants in the kernel under natural boundary conditions".into(),
        ));
    }
    let mut out = ControlSignal::zeros(rhs.grid, rhs.dim);
    if gamma_prime == 0.0 {
        for (o, r) in out.values.iter_mut().zip(&rhs.values) {
            *o = -r / gamma;
        }
        return Ok(out);
    }
    let n = rhs.grid.nodes();
    let c = gamma_prime / rhs.grid.dt().powi(2);
    let mut sub = vec![c; n];
    let mut sup = vec![c; n];
    let diag = vec![-2.0 * c - gamma; n];
    sup[0] = 2.0 * c;
    sub[n - 1] = 2.0 * c;
    let mut col = vec![0.0; n];
    for i in 0..rhs.dim {
        for k in 0..n {
            col[k] = rhs.get(k, i);
        }
        let x = thomas(&sub, &diag, &sup, &col);
        for k in 0..n {
            out.values[k * rhs.dim + i] = x[k];
        }
    }
    Ok(out)
}

/// Tridiagonal solve; `sub[k]` multiplies `x[k-1]`, `sup[k]` multiplies `x[k+1]`.
fn thomas(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = sup[0] / diag[0];
    d[0] = rhs[0] / diag[0];
    for k in 1..n {
        let m = diag[k] - sub[k] * c[k - 1];
        c[k] = sup[k] / m;
        d[k] = (rhs[k] - sub[k] * d[k - 1]) / m;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for k in (0..n - 1).rev() {
        x[k] = d[k] - c[k] * x[k + 1];
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    #[test]
    fn sine_cost_matches_closed_form() {
        let grid = TimeGrid::new(1.0, 400).unwrap();
        let w = 2.0 * std::f64::consts::PI;
        let u = ControlSignal::from_fn(grid, 1, |t, _| (w * t).sin());
        let (g, gp) = (0.3, 0.05);
        let exact = 0.5 * (g * 0.5 + gp * w * w * 0.5);
        let c = regularization_cost(&u, g, gp);
        assert!((c - exact).abs() / exact < 1e-4, "{c} vs {exact}");
    }

    #[test]
    fn bvp_with_zero_gamma_prime_is_pointwise() {
        let grid = TimeGrid::new(2.0, 10).unwrap();
        let r = ControlSignal::from_fn(grid, 2, |t, i| t + i as f64);
        let u = solve_control_bvp(&r, 0.5, 0.0).unwrap();
        for (a, b) in u.values.iter().zip(&r.values) {
            assert_eq!(*a, -b / 0.5);
        }
    }

    #[test]
    fn bvp_rejects_degenerate_weights() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let r = ControlSignal::zeros(grid, 1);
        assert!(matches!(solve_control_bvp(&r, 0.0, 0.0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn bvp_matches_dense_solve() {
        let grid = TimeGrid::new(1.5, 12).unwrap();
        let r = ControlSignal::from_fn(grid, 1, |t, _| (3.0 * t).cos() + t * t);
        let (g, gp) = (0.7, 0.2);
        let u = solve_control_bvp(&r, g, gp).unwrap();
        let n = grid.nodes();
        let c = gp / grid.dt().powi(2);
        let mut a = DMatrix::<f64>::zeros(n, n);
        for k in 0..n {
            a[(k, k)] = -2.0 * c - g;
            if k == 0 {
                a[(0, 1)] = 2.0 * c;
            } else if k == n - 1 {
                a[(k, k - 1)] = 2.0 * c;
            } else {
                a[(k, k - 1)] = c;
                a[(k, k + 1)] = c;
            }
        }
        let x = a.lu().solve(&DVector::from_vec(r.values.clone())).unwrap();
        for k in 0..n {
            assert!((x[k] - u.values[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn second_derivative_of_quadratic_is_exact_inside() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let u = ControlSignal::from_fn(grid, 1, |t, _| 3.0 * t * t);
        let d = u.second_derivative();
        for k in 1..8 {
            assert!((d.get(k, 0) - 6.0).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn bvp_solution_satisfies_equation(
            vals in proptest::collection::vec(-5.0f64..5.0, 9),
            g in 0.05f64..3.0,
            gp in 0.0f64..2.0,
        ) {
            let grid = TimeGrid::new(1.0, 8).unwrap();
            let r = ControlSignal { grid, dim: 1, values: vals };
            let u = solve_control_bvp(&r, g, gp).unwrap();
            let mut res = u.second_derivative().scaled(gp);
            res.axpy(-g, &u);
            for (a, b) in res.values.iter().zip(&r.values) {
                prop_assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn cost_gradient_is_gamma_u_minus_gamma_prime_upp(
            vals in proptest::collection::vec(-2.0f64..2.0, 7),
            g in 0.0f64..2.0,
            gp in 0.0f64..1.0,
        ) {
            let grid = TimeGrid::new(0.9, 6).unwrap();
            let u = ControlSignal { grid, dim: 1, values: vals };
            let mut analytic = u.scaled(g);
            analytic.axpy(-gp, &u.second_derivative());
            for k in 0..grid.nodes() {
                let h = 1e-6;
                let mut up = u.clone();
                let mut um = u.clone();
                up.values[k] += h;
                um.values[k] -= h;
                let fd = (regularization_cost(&up, g, gp) - regularization_cost(&um, g, gp))
                    / (2.0 * h) / grid.weight(k);
                prop_assert!((fd - analytic.values[k]).abs() < 1e-5 * (1.0 + fd.abs()));
            }
        }
    }
}
