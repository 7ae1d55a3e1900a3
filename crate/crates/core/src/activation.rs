//! Compactly supported bump activation.
//!
//! `w(x) = c * exp(-1 / (1 - |x|^2))` on the open unit ball and zero outside,
//! with `c` chosen so that `w` integrates to one over `R^d`.

use statrs::function::gamma::gamma;

use crate::error::{Error, Result};

/// Points with `|x| >= 1 - BOUNDARY_EPS` are treated as outside the support.
const BOUNDARY_EPS: f64 = 1e-12;

/// Smooth radial bump normalized to unit mass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BumpActivation {
    dim: usize,
    norm_const: f64,
}

impl BumpActivation {
    /// Builds the activation for dimension `dim`, calibrating the
    /// normalization constant by adaptive quadrature of the radial profile.
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("activation dimension must be positive"));
        }
        let mass = unnormalized_mass(dim);
        Ok(Self {
            dim,
            norm_const: 1.0 / mass,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn norm_const(&self) -> f64 {
        self.norm_const
    }

    pub fn support_radius(&self) -> f64 {
        1.0
    }

    /// `w(x)`.
    pub fn eval(&self, x: &[f64]) -> f64 {
        let r2 = norm_sq(x);
        match inside(r2) {
            Some(s) => self.norm_const * (-1.0 / s).exp(),
            None => 0.0,
        }
    }

    /// `grad w(x) = w(x) * (-2x / (1 - |x|^2)^2)`, written into `out`.
    pub fn grad(&self, x: &[f64], out: &mut [f64]) {
        let r2 = norm_sq(x);
        match inside(r2) {
            Some(s) => {
                let w = self.norm_const * (-1.0 / s).exp();
                let f = -2.0 * w / (s * s);
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = f * xi;
                }
            }
            None => out.iter_mut().for_each(|o| *o = 0.0),
        }
    }

    pub fn grad_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        self.grad(x, &mut g);
        g
    }

    /// Row-major `d x d` Hessian of `w`, written into `out`.
    pub fn hess(&self, x: &[f64], out: &mut [f64]) {
        self.eval_all(x, &mut [], out, false);
    }

    pub fn hess_vec(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        let mut h = vec![0.0; d * d];
        self.hess(x, &mut h);
        h
    }

    /// Value, gradient and Hessian in one pass. Returns the value; `grad` is
    /// filled when `want_grad` is set, `hess` (row-major) whenever it is
    /// non-empty.
    pub fn eval_all(&self, x: &[f64], grad: &mut [f64], hess: &mut [f64], want_grad: bool) -> f64 {
        let d = x.len();
        let r2 = norm_sq(x);
        let Some(s) = inside(r2) else {
            if want_grad {
                grad.iter_mut().for_each(|o| *o = 0.0);
            }
            hess.iter_mut().for_each(|o| *o = 0.0);
            return 0.0;
        };
        let w = self.norm_const * (-1.0 / s).exp();
        if w == 0.0 {
            if want_grad {
                grad.iter_mut().for_each(|o| *o = 0.0);
            }
            hess.iter_mut().for_each(|o| *o = 0.0);
            return 0.0;
        }
        let s2 = s * s;
        if want_grad {
            let f = -2.0 * w / s2;
            for (o, xi) in grad.iter_mut().zip(x) {
                *o = f * xi;
            }
        }
        if !hess.is_empty() {
            // d_ij w = w * (4 x_i x_j / s^4 - 8 x_i x_j / s^3 - 2 delta_ij / s^2)
            let outer = w * (4.0 / (s2 * s2) - 8.0 / (s2 * s));
            let diag = -2.0 * w / s2;
            for i in 0..d {
                for j in 0..d {
                    let mut v = outer * x[i] * x[j];
                    if i == j {
                        v += diag;
                    }
                    hess[i * d + j] = v;
                }
            }
        }
        w
    }
}

#[inline]
fn norm_sq(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Returns `1 - |x|^2` when the point lies strictly inside the support.
#[inline]
fn inside(r2: f64) -> Option<f64> {
    let lim = 1.0 - BOUNDARY_EPS;
    if r2 < lim * lim {
        Some(1.0 - r2)
    } else {
        None
    }
}

/// Surface area of the unit sphere in `R^d`.
fn sphere_area(dim: usize) -> f64 {
    let h = dim as f64 / 2.0;
    2.0 * std::f64::consts::PI.powf(h) / gamma(h)
}

/// `int_{R^d} exp(-1/(1-|x|^2)) dx` via the radial integral.
fn unnormalized_mass(dim: usize) -> f64 {
    let p = dim as i32 - 1;
    let profile = |r: f64| {
        let s = 1.0 - r * r;
        if s <= 0.0 {
            0.0
        } else {
            r.powi(p) * (-1.0 / s).exp()
        }
    };
    sphere_area(dim) * adaptive_simpson(&profile, 0.0, 1.0, 1e-14)
}

/// Adaptive Simpson quadrature on `[a, b]` to absolute tolerance `tol`.
pub(crate) fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn step(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
                + step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
        }
    }
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    step(f, a, b, fa, fm, fb, whole, tol, 48)
}
