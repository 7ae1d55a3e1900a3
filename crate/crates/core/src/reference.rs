//! Reference solutions and error tables.
//!
//! The heat solution is the Gaussian convolution of a compactly supported
//! initial condition, integrated by tensor trapezoid rules whose node count
//! doubles until successive values agree. Black–Scholes in log-price reduces
//! to it by discounting and a moving frame.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{BumpSum, Field};
use crate::quadrature::{inner_product, InnerProduct, NodeField, QuadratureRule};


/// Convolution of `u0` with the heat kernel at `(t, x)`, and its spatial
/// gradient when `grad` is given. `tol` bounds the change between
/// successive node doublings.
pub fn heat_convolution(u0: &BumpSum, kappa: f64, t: f64, x: &[f64], tol: f64, grad: Option<&mut [f64]>) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::invalid(format!("heat solution needs t > 0, got {t}")));
    }
    if !(kappa > 0.0) {
        return Err(Error::invalid("diffusivity must be positive"));
    }
    let d = x.len();
    let var2 = 4.0 * kappa * t;
    let reach = 10.0 * (2.0 * kappa * t).sqrt();
    let (mut lo, mut hi) = u0.support();
    for k in 0..d {
        lo[k] = lo[k].max(x[k] - reach);
        hi[k] = hi[k].min(x[k] + reach);
        if lo[k] >= hi[k] {
            if let Some(g) = grad {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
            return Ok(0.0);
        }
    }
    let norm = (std::f64::consts::PI * var2).powf(-(d as f64) / 2.0);
    let want_grad = grad.is_some();
    // out[0] = value, out[1..] = gradient
    let eval = |level: u32, out: &mut [f64]| {
        let intervals = 1usize << level;
        let steps: Vec<f64> = (0..d).map(|k| (hi[k] - lo[k]) / intervals as f64).collect();
        let total = (intervals + 1).pow(d as u32);
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut y = vec![0.0; d];
        for flat in 0..total {
            let mut rem = flat;
            let mut weight = 1.0;
            let mut r2 = 0.0;
            for k in (0..d).rev() {
                let i = rem % (intervals + 1);
                rem /= intervals + 1;
                y[k] = lo[k] + i as f64 * steps[k];
                weight *= steps[k] * if i == 0 || i == intervals { 0.5 } else { 1.0 };
                r2 += (x[k] - y[k]).powi(2);
            }
            let u = u0.value(&y);
            if u == 0.0 {
                continue;
            }
            let kern = norm * (-r2 / var2).exp() * u * weight;
            out[0] += kern;
            if want_grad {
                for k in 0..d {
                    out[1 + k] -= kern * 2.0 * (x[k] - y[k]) / var2;
                }
            }
        }
    };
    let width = if want_grad { 1 + d } else { 1 };
    let mut prev = vec![0.0; width];
    let mut cur = vec![0.0; width];
    eval(4, &mut prev);
    let max_level = if d == 1 { 14 } else { 9 };
    for level in 5..=max_level {
        eval(level, &mut cur);
        let diff = prev.iter().zip(&cur).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if diff < tol {
            if let Some(g) = grad {
                g.copy_from_slice(&cur[1..]);
            }
            return Ok(cur[0]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Err(Error::NonFinite(format!("heat convolution did not reach tolerance {tol:.1e} at t = {t}")))
}

/// `e^{-rt} v(t, x + (r - sigma^2/2) t)` with `v` the heat solution for
/// `kappa = sigma^2 / 2`.
pub fn bs_reference(sigma: f64, r: f64, u0: &BumpSum, t: f64, x: &[f64], tol: f64) -> Result<f64> {
    let kappa = 0.5 * sigma * sigma;
    let shifted: Vec<f64> = x.iter().map(|xi| xi + (r - kappa) * t).collect();
    Ok((-r * t).exp() * heat_convolution(u0, kappa, t, &shifted, tol, None)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "equation", rename_all = "snake_case")]
pub enum ExactKind {
    Heat { kappa: f64 },
    BlackScholes { sigma: f64, r: f64 },
}

/// Reference solution `u(t, x)` of a benchmark problem.
#[derive(Debug, Clone)]
pub struct ExactSolution {
    pub kind: ExactKind,
    pub u0: BumpSum,
    pub tol: f64,
    /// Box `(lower, upper)` on which the solution is compared.
    pub validity: (Vec<f64>, Vec<f64>),
}

impl ExactSolution {
    pub fn new(kind: ExactKind, u0: BumpSum, validity: (Vec<f64>, Vec<f64>)) -> Self {
        Self {
            kind,
            u0,
            tol: 1e-10,
            validity,
        }
    }

    pub fn method(&self) -> &'static str {
        "convolution"
    }

    pub fn value(&self, t: f64, x: &[f64]) -> Result<f64> {
        self.value_and_grad(t, x, None)
    }

    /// Value and, if requested, spatial gradient.
    pub fn value_and_grad(&self, t: f64, x: &[f64], grad: Option<&mut [f64]>) -> Result<f64> {
        if t == 0.0 {
            if let Some(g) = grad {
                self.u0.gradient(x, g);
            }
            return Ok(self.u0.value(x));
        }
        let v = match self.kind {
            ExactKind::Heat { kappa } => heat_convolution(&self.u0, kappa, t, x, self.tol, grad)?,
            ExactKind::BlackScholes { sigma, r } => {
                let kappa = 0.5 * sigma * sigma;
                let shifted: Vec<f64> = x.iter().map(|xi| xi + (r - kappa) * t).collect();
                let disc = (-r * t).exp();
                match grad {
                    Some(g) => {
                        let v = heat_convolution(&self.u0, kappa, t, &shifted, self.tol, Some(&mut *g))?;
                        g.iter_mut().for_each(|gi| *gi *= disc);
                        disc * v
                    }
                    None => disc * heat_convolution(&self.u0, kappa, t, &shifted, self.tol, None)?,
                }
            }
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("reference solution".into()))
        }
    }

    /// Node values and gradients at time `t`.
    pub fn node_field(&self, t: f64, rule: &QuadratureRule) -> Result<NodeField> {
        let d = rule.dim();
        let mut values = Vec::with_capacity(rule.len());
        let mut grads = vec![0.0; rule.len() * d];
        for (j, x) in rule.nodes().enumerate() {
            values.push(self.value_and_grad(t, x, Some(&mut grads[j * d..(j + 1) * d]))?);
        }
        Ok(NodeField::with_grads(values, grads))
    }

    /// `u_t - (spatial operator) u` at `(t, x)` by fourth-order central
    /// differences with spatial step `step`.
    pub fn residual(&self, t: f64, x: &[f64], step: f64) -> Result<f64> {
        let d = x.len();
        let tight = Self {
            tol: self.tol.min(1e-13),
            ..self.clone()
        };
        let u = |tt: f64, xx: &[f64]| tight.value(tt, xx);
        let tau = step.min(t / 8.0);
        let c = [1.0 / 12.0, -2.0 / 3.0, 0.0, 2.0 / 3.0, -1.0 / 12.0];
        let c2 = [-1.0 / 12.0, 4.0 / 3.0, -5.0 / 2.0, 4.0 / 3.0, -1.0 / 12.0];
        let offs = [-2.0, -1.0, 0.0, 1.0, 2.0];
        let mut ut = 0.0;
        for (o, w) in offs.iter().zip(c) {
            if w != 0.0 {
                ut += w * u(t + o * tau, x)?;
            }
        }
        ut /= tau;
        let mut lap = 0.0;
        let mut ux = vec![0.0; d];
        let mut y = x.to_vec();
        for k in 0..d {
            for (i, o) in offs.iter().enumerate() {
                y[k] = x[k] + o * step;
                let v = u(t, &y)?;
                lap += c2[i] * v;
                ux[k] += c[i] * v;
            }
            y[k] = x[k];
        }
        lap /= step * step;
        ux.iter_mut().for_each(|v| *v /= step);
        let rhs = match self.kind {
            ExactKind::Heat { kappa } => kappa * lap,
            ExactKind::BlackScholes { sigma, r } => {
                let a = 0.5 * sigma * sigma;
                a * lap + (r - a) * ux.iter().sum::<f64>() - r * u(t, x)?
            }
        };
        Ok(ut - rhs)
    }

    /// Largest absolute residual over `probes` random points with
    /// `t` in `[t_lo, t_hi]` and `x` in the validity box.
    pub fn residual_probe(&self, probes: usize, t_lo: f64, t_hi: f64, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = &self.validity;
        let mut worst = 0.0f64;
        for _ in 0..probes {
            let t = rng.random_range(t_lo..t_hi);
            let x: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| rng.random_range(*a..*b)).collect();
            worst = worst.max(self.residual(t, &x, 2.5e-3)?.abs());
        }
        Ok(worst)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub k: usize,
    pub t_k: f64,
    pub l2_error: f64,
    pub h1_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorTable {
    pub rows: Vec<ErrorRow>,
    pub max_l2: f64,
    pub max_h1: f64,
}

/// `L2` and `H1` errors of the numerical iterates `numeric[k]` at `times[k]`.
pub fn error_report(numeric: &[&dyn Field], exact: &ExactSolution, rule: &QuadratureRule, times: &[f64]) -> Result<ErrorTable> {
    if numeric.len() != times.len() {
        return Err(Error::Dimension("one time per iterate is required".into()));
    }
    let (lo, hi) = &exact.validity;
    let dom = rule.domain();
    if lo.len() != rule.dim() || (0..rule.dim()).any(|k| dom.lower()[k] < lo[k] - 1e-12 || dom.upper()[k] > hi[k] + 1e-12) {
        return Err(Error::Dimension("rule extends beyond the reference solution's validity box".into()));
    }
    let mut rows = Vec::with_capacity(times.len());
    for (k, (u, &t)) in numeric.iter().zip(times).enumerate() {
        let num = u.node_field(rule);
        let ex = exact.node_field(t, rule)?;
        let diff = num.combine(1.0, &ex, -1.0);
        rows.push(ErrorRow {
            k,
            t_k: t,
            l2_error: inner_product(&diff, &diff, rule, InnerProduct::L2)?.max(0.0).sqrt(),
            h1_error: inner_product(&diff, &diff, rule, InnerProduct::H1)?.max(0.0).sqrt(),
        });
    }
    let max_l2 = rows.iter().map(|r| r.l2_error).fold(0.0, f64::max);
    let max_h1 = rows.iter().map(|r| r.h1_error).fold(0.0, f64::max);
    Ok(ErrorTable { rows, max_l2, max_h1 })
}
