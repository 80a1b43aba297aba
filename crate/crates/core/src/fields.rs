//! Potentials, control profiles, Zeeman and Rashba fields.
//!
//! Every field is a finite sum of analytic shapes, so values and derivatives are
//! exact. The Wigner solver uses restrictions to the line `x = (s, 0, 0)`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

fn v3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScalarShape {
    Constant {
        value: f64,
    },
    /// `k/2 |x - c|^2`
    Harmonic {
        stiffness: f64,
        #[serde(default)]
        center: [f64; 3],
    },
    /// `g . x`
    Linear {
        gradient: [f64; 3],
    },
    /// `a exp(-|x - c|^2 / (2 w^2))`
    Gaussian {
        amplitude: f64,
        center: [f64; 3],
        width: f64,
    },
    /// `a cos(k . x + phase)`
    Cosine {
        amplitude: f64,
        wavevector: [f64; 3],
        #[serde(default)]
        phase: f64,
    },
}

impl ScalarShape {
    pub fn value(&self, x: &Vec3) -> f64 {
        match self {
            ScalarShape::Constant { value } => *value,
            ScalarShape::Harmonic { stiffness, center } => {
                0.5 * stiffness * (x - v3(*center)).norm_squared()
            }
            ScalarShape::Linear { gradient } => v3(*gradient).dot(x),
            ScalarShape::Gaussian {
                amplitude,
                center,
                width,
            } => amplitude * (-(x - v3(*center)).norm_squared() / (2.0 * width * width)).exp(),
            ScalarShape::Cosine {
                amplitude,
                wavevector,
                phase,
            } => amplitude * (v3(*wavevector).dot(x) + phase).cos(),
        }
    }

    pub fn gradient(&self, x: &Vec3) -> Vec3 {
        match self {
            ScalarShape::Constant { .. } => Vec3::zeros(),
            ScalarShape::Harmonic { stiffness, center } => (x - v3(*center)) * *stiffness,
            ScalarShape::Linear { gradient } => v3(*gradient),
            ScalarShape::Gaussian { center, width, .. } => {
                let r = x - v3(*center);
                r * (-self.value(x) / (width * width))
            }
            ScalarShape::Cosine {
                amplitude,
                wavevector,
                phase,
            } => {
                let k = v3(*wavevector);
                k * (-amplitude * (k.dot(x) + phase).sin())
            }
        }
    }

    pub fn hessian(&self, x: &Vec3) -> Mat3 {
        match self {
            ScalarShape::Constant { .. } | ScalarShape::Linear { .. } => Mat3::zeros(),
            ScalarShape::Harmonic { stiffness, .. } => Mat3::identity() * *stiffness,
            ScalarShape::Gaussian { center, width, .. } => {
                let r = x - v3(*center);
                let w2 = width * width;
                (r * r.transpose() / (w2 * w2) - Mat3::identity() / w2) * self.value(x)
            }
            ScalarShape::Cosine { wavevector, .. } => {
                let k = v3(*wavevector);
                k * k.transpose() * (-self.value(x))
            }
        }
    }

    fn validate(&self, what: &str, errs: &mut Vec<String>) {
        if let ScalarShape::Gaussian { width, .. } = self {
            if !(*width > 0.0) {
                errs.push(format!("{what}: gaussian width must be positive"));
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VectorShape {
    Uniform {
        value: [f64; 3],
    },
    /// `a + M x`, with `M` given row by row.
    Affine {
        offset: [f64; 3],
        matrix: [[f64; 3]; 3],
    },
    /// `a cos(k . x + phase)`
    Cosine {
        amplitude: [f64; 3],
        wavevector: [f64; 3],
        #[serde(default)]
        phase: f64,
    },
    /// `a exp(-|x - c|^2 / (2 w^2))`
    Gaussian {
        amplitude: [f64; 3],
        center: [f64; 3],
        width: f64,
    },
}

impl VectorShape {
    pub fn value(&self, x: &Vec3) -> Vec3 {
        match self {
            VectorShape::Uniform { value } => v3(*value),
            VectorShape::Affine { offset, matrix } => v3(*offset) + mat(matrix) * x,
            VectorShape::Cosine {
                amplitude,
                wavevector,
                phase,
            } => v3(*amplitude) * (v3(*wavevector).dot(x) + phase).cos(),
            VectorShape::Gaussian {
                amplitude,
                center,
                width,
            } => {
                v3(*amplitude)
                    * (-(x - v3(*center)).norm_squared() / (2.0 * width * width)).exp()
            }
        }
    }

    /// `J[i][j] = dV_i / dx_j`
    pub fn jacobian(&self, x: &Vec3) -> Mat3 {
        match self {
            VectorShape::Uniform { .. } => Mat3::zeros(),
            VectorShape::Affine { matrix, .. } => mat(matrix),
            VectorShape::Cosine {
                amplitude,
                wavevector,
                phase,
            } => {
                let k = v3(*wavevector);
                v3(*amplitude) * k.transpose() * (-(k.dot(x) + phase).sin())
            }
            VectorShape::Gaussian {
                amplitude,
                center,
                width,
            } => {
                let r = x - v3(*center);
                let w2 = width * width;
                let g = (-r.norm_squared() / (2.0 * w2)).exp();
                v3(*amplitude) * r.transpose() * (-g / w2)
            }
        }
    }

    pub fn is_uniform(&self) -> bool {
        match self {
            VectorShape::Uniform { .. } => true,
            VectorShape::Affine { matrix, .. } => matrix.iter().flatten().all(|&m| m == 0.0),
            VectorShape::Cosine {
                amplitude,
                wavevector,
                ..
            } => amplitude.iter().all(|&a| a == 0.0) || wavevector.iter().all(|&k| k == 0.0),
            VectorShape::Gaussian { amplitude, .. } => amplitude.iter().all(|&a| a == 0.0),
        }
    }

    fn validate(&self, what: &str, errs: &mut Vec<String>) {
        if let VectorShape::Gaussian { width, .. } = self {
            if !(*width > 0.0) {
                errs.push(format!("{what}: gaussian width must be positive"));
            }
        }
    }
}

fn mat(m: &[[f64; 3]; 3]) -> Mat3 {
    Mat3::from_row_slice(&[
        m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
    ])
}

/// Static potential `U0`, control profiles `phi_i`, Zeeman field `B` and Rashba
/// field `K`. The controlled potential is `U = U0 + sum_i u_i phi_i`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSet {
    #[serde(default)]
    pub potential: Vec<ScalarShape>,
    #[serde(default)]
    pub controls: Vec<ScalarShape>,
    #[serde(default)]
    pub magnetic: Vec<VectorShape>,
    #[serde(default)]
    pub rashba: Vec<VectorShape>,
}

impl FieldSet {
    pub fn control_dim(&self) -> usize {
        self.controls.len()
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (i, s) in self.potential.iter().enumerate() {
            s.validate(&format!("potential[{i}]"), &mut errs);
        }
        for (i, s) in self.controls.iter().enumerate() {
            s.validate(&format!("controls[{i}]"), &mut errs);
        }
        for (i, s) in self.magnetic.iter().enumerate() {
            s.validate(&format!("magnetic[{i}]"), &mut errs);
        }
        for (i, s) in self.rashba.iter().enumerate() {
            s.validate(&format!("rashba[{i}]"), &mut errs);
        }
        if self.controls.is_empty() {
            errs.push("at least one control profile is required".into());
        }
        errs
    }

    fn check_u(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.controls.len() {
            return Err(Error::Dimension {
                what: "control vector",
                expected: self.controls.len(),
                got: u.len(),
            });
        }
        Ok(())
    }

    pub fn eval_potential(&self, x: &Vec3, u: &[f64]) -> Result<f64> {
        self.check_u(u)?;
        Ok(self.potential_unchecked(x, u))
    }

    pub(crate) fn potential_unchecked(&self, x: &Vec3, u: &[f64]) -> f64 {
        let mut v: f64 = self.potential.iter().map(|s| s.value(x)).sum();
        for (ui, phi) in u.iter().zip(&self.controls) {
            v += ui * phi.value(x);
        }
        v
    }

    /// Electric field `E = -grad U`.
    pub fn eval_electric(&self, x: &Vec3, u: &[f64]) -> Result<Vec3> {
        self.check_u(u)?;
        Ok(self.electric_unchecked(x, u))
    }

    pub(crate) fn electric_unchecked(&self, x: &Vec3, u: &[f64]) -> Vec3 {
        let mut g = Vec3::zeros();
        for s in &self.potential {
            g += s.gradient(x);
        }
        for (ui, phi) in u.iter().zip(&self.controls) {
            g += phi.gradient(x) * *ui;
        }
        -g
    }

    /// `dE_j / dx_l`, which is `-Hess U` and therefore symmetric.
    pub fn electric_jacobian(&self, x: &Vec3, u: &[f64]) -> Result<Mat3> {
        self.check_u(u)?;
        Ok(self.electric_jacobian_unchecked(x, u))
    }

    pub(crate) fn electric_jacobian_unchecked(&self, x: &Vec3, u: &[f64]) -> Mat3 {
        let mut h = Mat3::zeros();
        for s in &self.potential {
            h += s.hessian(x);
        }
        for (ui, phi) in u.iter().zip(&self.controls) {
            h += phi.hessian(x) * *ui;
        }
        -h
    }

    /// `dE / du_i = -grad phi_i`.
    pub fn electric_control_derivative(&self, x: &Vec3, i: usize) -> Vec3 {
        -self.controls[i].gradient(x)
    }

    pub fn eval_magnetic(&self, x: &Vec3) -> Vec3 {
        self.magnetic.iter().map(|s| s.value(x)).sum()
    }

    pub fn magnetic_jacobian(&self, x: &Vec3) -> Mat3 {
        self.magnetic.iter().map(|s| s.jacobian(x)).sum()
    }

    pub fn eval_rashba(&self, x: &Vec3) -> Vec3 {
        self.rashba.iter().map(|s| s.value(x)).sum()
    }

    pub fn rashba_jacobian(&self, x: &Vec3) -> Mat3 {
        self.rashba.iter().map(|s| s.jacobian(x)).sum()
    }

    /// Precession vector `2(B - p x K)`; the spin obeys `d' = -B_tot x d`.
    pub fn eval_total_precession_field(&self, x: &Vec3, p: &Vec3) -> Vec3 {
        (self.eval_magnetic(x) - p.cross(&self.eval_rashba(x))) * 2.0
    }

    pub fn spin_fields_uniform(&self) -> bool {
        self.magnetic.iter().all(VectorShape::is_uniform)
            && self.rashba.iter().all(VectorShape::is_uniform)
    }

    // Restrictions to the line x = (s, 0, 0) used by the Wigner solver.

    pub fn potential_line(&self, s: f64) -> f64 {
        let x = Vec3::new(s, 0.0, 0.0);
        self.potential.iter().map(|f| f.value(&x)).sum()
    }

    pub fn potential_line_deriv(&self, s: f64) -> f64 {
        let x = Vec3::new(s, 0.0, 0.0);
        self.potential.iter().map(|f| f.gradient(&x)[0]).sum()
    }

    pub fn control_line(&self, i: usize, s: f64) -> f64 {
        self.controls[i].value(&Vec3::new(s, 0.0, 0.0))
    }

    pub fn control_line_deriv(&self, i: usize, s: f64) -> f64 {
        self.controls[i].gradient(&Vec3::new(s, 0.0, 0.0))[0]
    }

    pub fn magnetic_line(&self, k: usize, s: f64) -> f64 {
        self.eval_magnetic(&Vec3::new(s, 0.0, 0.0))[k]
    }

    pub fn magnetic_line_deriv(&self, k: usize, s: f64) -> f64 {
        self.magnetic_jacobian(&Vec3::new(s, 0.0, 0.0))[(k, 0)]
    }

    pub fn rashba_line(&self, k: usize, s: f64) -> f64 {
        self.eval_rashba(&Vec3::new(s, 0.0, 0.0))[k]
    }

    pub fn rashba_line_deriv(&self, k: usize, s: f64) -> f64 {
        self.rashba_jacobian(&Vec3::new(s, 0.0, 0.0))[(k, 0)]
    }

    /// True when every field restricted to the line keeps trajectories on it:
    /// no transverse force along the axis.
    pub fn line_invariant(&self) -> bool {
        let probes = [-3.0, -1.3, -0.2, 0.4, 1.7, 2.9];
        let u: Vec<f64> = vec![1.0; self.controls.len()];
        probes.iter().all(|&s| {
            let e = self.electric_unchecked(&Vec3::new(s, 0.0, 0.0), &u);
            e[1].abs() < 1e-12 && e[2].abs() < 1e-12
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_fields() -> FieldSet {
        FieldSet {
            potential: vec![
                ScalarShape::Harmonic {
                    stiffness: 1.3,
                    center: [0.1, -0.2, 0.3],
                },
                ScalarShape::Gaussian {
                    amplitude: 0.4,
                    center: [0.2, 0.1, -0.1],
                    width: 0.8,
                },
                ScalarShape::Cosine {
                    amplitude: 0.2,
                    wavevector: [0.7, -0.3, 0.5],
                    phase: 0.3,
                },
            ],
            controls: vec![
                ScalarShape::Linear {
                    gradient: [-1.0, 0.0, 0.0],
                },
                ScalarShape::Gaussian {
                    amplitude: 1.0,
                    center: [0.5, 0.0, 0.0],
                    width: 1.1,
                },
            ],
            magnetic: vec![
                VectorShape::Uniform {
                    value: [0.0, 0.0, 0.5],
                },
                VectorShape::Cosine {
                    amplitude: [0.1, 0.2, -0.1],
                    wavevector: [0.9, 0.2, 0.0],
                    phase: 0.1,
                },
            ],
            rashba: vec![
                VectorShape::Gaussian {
                    amplitude: [0.0, 0.3, 0.2],
                    center: [0.0, 0.0, 0.0],
                    width: 1.5,
                },
                VectorShape::Affine {
                    offset: [0.1, 0.0, 0.0],
                    matrix: [[0.0, 0.1, 0.0], [0.2, 0.0, 0.0], [0.0, 0.0, -0.1]],
                },
            ],
        }
    }

    #[test]
    fn harmonic_potential_and_field() {
        let f = FieldSet {
            potential: vec![ScalarShape::Harmonic {
                stiffness: 1.0,
                center: [0.0; 3],
            }],
            controls: vec![ScalarShape::Linear {
                gradient: [-1.0, 0.0, 0.0],
            }],
            ..Default::default()
        };
        let x = Vec3::new(1.0, 2.0, 0.0);
        assert_eq!(f.eval_potential(&x, &[0.0]).unwrap(), 2.5);
        assert_eq!(f.eval_electric(&x, &[0.0]).unwrap(), Vec3::new(-1.0, -2.0, 0.0));
    }

    #[test]
    fn wrong_control_length_is_rejected() {
        let f = sample_fields();
        let err = f.eval_potential(&Vec3::zeros(), &[1.0]).unwrap_err();
        assert!(matches!(err, Error::Dimension { expected: 2, got: 1, .. }));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let f = sample_fields();
        let u = [0.7, -0.4];
        let x = Vec3::new(0.3, -0.6, 0.9);
        let h = 1e-5;
        let e = f.eval_electric(&x, &u).unwrap();
        let je = f.electric_jacobian(&x, &u).unwrap();
        let jb = f.magnetic_jacobian(&x);
        let jk = f.rashba_jacobian(&x);
        for l in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[l] += h;
            xm[l] -= h;
            let du = (f.eval_potential(&xp, &u).unwrap() - f.eval_potential(&xm, &u).unwrap())
                / (2.0 * h);
            assert!((du + e[l]).abs() < 1e-8);
            let de = (f.eval_electric(&xp, &u).unwrap() - f.eval_electric(&xm, &u).unwrap())
                / (2.0 * h);
            let db = (f.eval_magnetic(&xp) - f.eval_magnetic(&xm)) / (2.0 * h);
            let dk = (f.eval_rashba(&xp) - f.eval_rashba(&xm)) / (2.0 * h);
            for j in 0..3 {
                assert!((de[j] - je[(j, l)]).abs() < 1e-8);
                assert!((db[j] - jb[(j, l)]).abs() < 1e-8);
                assert!((dk[j] - jk[(j, l)]).abs() < 1e-8);
            }
        }
        assert!((je - je.transpose()).norm() < 1e-14);
    }

    #[test]
    fn control_derivative_of_field() {
        let f = sample_fields();
        let x = Vec3::new(0.3, -0.6, 0.9);
        let u = [0.7, -0.4];
        for i in 0..2 {
            let mut up = u;
            up[i] += 1.0;
            let de = f.eval_electric(&x, &up).unwrap() - f.eval_electric(&x, &u).unwrap();
            assert!((de - f.electric_control_derivative(&x, i)).norm() < 1e-14);
        }
    }

    #[test]
    fn precession_field_combines_zeeman_and_rashba() {
        let f = sample_fields();
        let x = Vec3::new(0.2, 0.1, 0.0);
        let p = Vec3::new(1.0, -0.5, 0.3);
        let expect = (f.eval_magnetic(&x) - p.cross(&f.eval_rashba(&x))) * 2.0;
        assert_eq!(f.eval_total_precession_field(&x, &p), expect);
        assert!(!f.spin_fields_uniform());
    }

    #[test]
    fn fields_round_trip_through_json() {
        let f = sample_fields();
        let s = serde_json::to_string(&f).unwrap();
        let g: FieldSet = serde_json::from_str(&s).unwrap();
        assert_eq!(f, g);
    }
}
