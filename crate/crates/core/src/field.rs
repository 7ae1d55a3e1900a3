//! Functions on `R^d` that can be evaluated together with their gradient.

use serde::{Deserialize, Serialize};

use crate::activation::BumpActivation;
use crate::error::{Error, Result};
use crate::quadrature::{NodeField, QuadratureRule};

/// A real function with a spatial gradient.
pub trait Field: Sync {
    fn dim(&self) -> usize;

    fn value(&self, x: &[f64]) -> f64;

    fn gradient(&self, x: &[f64], out: &mut [f64]);

    /// Values and gradients at every node of `rule`.
    fn node_field(&self, rule: &QuadratureRule) -> NodeField {
        let d = self.dim();
        let mut values = Vec::with_capacity(rule.len());
        let mut grads = vec![0.0; rule.len() * d];
        for (j, x) in rule.nodes().enumerate() {
            values.push(self.value(x));
            self.gradient(x, &mut grads[j * d..(j + 1) * d]);
        }
        NodeField::with_grads(values, grads)
    }
}

/// Closure-backed field, mostly for closed-form test functions.
pub struct FnField<V, G> {
    dim: usize,
    value: V,
    grad: G,
}

impl<V, G> FnField<V, G>
where
    V: Fn(&[f64]) -> f64 + Sync,
    G: Fn(&[f64], &mut [f64]) + Sync,
{
    pub fn new(dim: usize, value: V, grad: G) -> Self {
        Self { dim, value, grad }
    }
}

impl<V, G> Field for FnField<V, G>
where
    V: Fn(&[f64]) -> f64 + Sync,
    G: Fn(&[f64], &mut [f64]) + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        (self.grad)(x, out)
    }
}

/// Identically zero function.
#[derive(Debug, Clone, Copy)]
pub struct ZeroField(pub usize);

impl Field for ZeroField {
    fn dim(&self) -> usize {
        self.0
    }

    fn value(&self, _x: &[f64]) -> f64 {
        0.0
    }

    fn gradient(&self, _x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
}

/// One term `amplitude * w((x - center) / width)` of a [`BumpSum`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BumpTerm {
    pub amplitude: f64,
    pub center: Vec<f64>,
    pub width: f64,
}

/// Finite sum of scaled, shifted bumps; the benchmark initial conditions.
#[derive(Debug, Clone)]
pub struct BumpSum {
    act: BumpActivation,
    terms: Vec<BumpTerm>,
}

impl BumpSum {
    pub fn new(act: BumpActivation, terms: Vec<BumpTerm>) -> Result<Self> {
        for t in &terms {
            if t.center.len() != act.dim() {
                return Err(Error::Dimension("bump center has wrong dimension".into()));
            }
            if !(t.width > 0.0) {
                return Err(Error::invalid("bump width must be positive"));
            }
        }
        Ok(Self { act, terms })
    }

    /// The unit bump `w` itself.
    pub fn unit(act: BumpActivation) -> Self {
        let d = act.dim();
        Self {
            act,
            terms: vec![BumpTerm {
                amplitude: 1.0,
                center: vec![0.0; d],
                width: 1.0,
            }],
        }
    }

    pub fn terms(&self) -> &[BumpTerm] {
        &self.terms
    }

    /// Per-axis bounds of the support.
    pub fn support(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.act.dim();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for t in &self.terms {
            for k in 0..d {
                lo[k] = lo[k].min(t.center[k] - t.width);
                hi[k] = hi[k].max(t.center[k] + t.width);
            }
        }
        (lo, hi)
    }
}

impl Field for BumpSum {
    fn dim(&self) -> usize {
        self.act.dim()
    }

    fn value(&self, x: &[f64]) -> f64 {
        let mut z = vec![0.0; x.len()];
        self.terms
            .iter()
            .map(|t| {
                for k in 0..x.len() {
                    z[k] = (x[k] - t.center[k]) / t.width;
                }
                t.amplitude * self.act.eval(&z)
            })
            .sum()
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        let mut z = vec![0.0; d];
        let mut g = vec![0.0; d];
        out.iter_mut().for_each(|o| *o = 0.0);
        for t in &self.terms {
            for k in 0..d {
                z[k] = (x[k] - t.center[k]) / t.width;
            }
            self.act.grad(&z, &mut g);
            for k in 0..d {
                out[k] += t.amplitude * g[k] / t.width;
            }
        }
    }
}
