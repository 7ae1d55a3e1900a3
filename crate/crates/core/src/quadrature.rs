//! Quadrature rules on a truncated box and the inner products built on them.
//!
//! Every integral over `R^d` in the solver is realized on a [`BoxDomain`]
//! that contains the supports of the networks involved. Networks are
//! compactly supported, so the truncation is exact as long as the box is
//! large enough.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_TENSOR_NODES: u128 = 100_000_000;

/// Axis-aligned box `[lower, upper]` in `R^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::Dimension("box bounds must have equal, positive length".into()));
        }
        for (l, u) in lower.iter().zip(&upper) {
            if !(l.is_finite() && u.is_finite() && l < u) {
                return Err(Error::invalid(format!("box axis [{l}, {u}] has empty interior")));
            }
        }
        Ok(Self { lower, upper })
    }

    /// `[-half_width, half_width]^d`.
    pub fn symmetric(dim: usize, half_width: f64) -> Result<Self> {
        Self::new(vec![-half_width; dim], vec![half_width; dim])
    }

    /// Box containing the support of every network whose parameters are
    /// clipped at radius `r`: neuron supports satisfy `|x| <= r (1 + r)`.
    pub fn for_clip_radius(dim: usize, r: f64) -> Result<Self> {
        Self::symmetric(dim, r * (1.0 + r) + 1.0)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn volume(&self) -> f64 {
        self.lower.iter().zip(&self.upper).map(|(l, u)| u - l).product()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (l, u))| *v >= *l && *v <= *u)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RuleKind {
    TensorMidpoint { points_per_axis: usize },
    MonteCarlo { samples: usize, seed: u64 },
}

/// Nodes and positive weights on a box.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    domain: BoxDomain,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    kind: RuleKind,
}

impl QuadratureRule {
    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn kind(&self) -> &RuleKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn node(&self, j: usize) -> &[f64] {
        let d = self.dim();
        &self.nodes[j * d..(j + 1) * d]
    }

    pub fn nodes(&self) -> impl Iterator<Item = &[f64]> {
        self.nodes.chunks_exact(self.dim())
    }

    pub fn nodes_flat(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Calls `f(j, x)` for the nodes that may lie in the box `[lo, hi]`, in
    /// increasing node order. Grids visit only the covering index block
    /// (plus one node of slack per side); other rules visit every node.
    pub fn for_each_node_near(&self, lo: &[f64], hi: &[f64], mut f: impl FnMut(usize, &[f64])) {
        let RuleKind::TensorMidpoint { points_per_axis: m } = self.kind else {
            for (j, x) in self.nodes().enumerate() {
                f(j, x);
            }
            return;
        };
        let d = self.dim();
        let mut first = vec![0usize; d];
        let mut last = vec![0usize; d];
        for k in 0..d {
            let l = self.domain.lower[k];
            let dx = (self.domain.upper[k] - l) / m as f64;
            let a = ((lo[k] - l) / dx - 0.5).floor() - 1.0;
            let b = ((hi[k] - l) / dx - 0.5).ceil() + 1.0;
            if !(a <= b) || b < 0.0 || a > (m - 1) as f64 {
                return;
            }
            first[k] = a.max(0.0) as usize;
            last[k] = b.min((m - 1) as f64) as usize;
        }
        let mut idx = first.clone();
        loop {
            let j = idx.iter().fold(0usize, |acc, &i| acc * m + i);
            f(j, self.node(j));
            let mut k = d;
            loop {
                if k == 0 {
                    return;
                }
                k -= 1;
                if idx[k] < last[k] {
                    idx[k] += 1;
                    break;
                }
                idx[k] = first[k];
            }
        }
    }

    /// Grid spacing per axis for tensor rules.
    pub fn spacing(&self) -> Option<Vec<f64>> {
        match self.kind {
            RuleKind::TensorMidpoint { points_per_axis } => Some(
                self.domain
                    .lower
                    .iter()
                    .zip(&self.domain.upper)
                    .map(|(l, u)| (u - l) / points_per_axis as f64)
                    .collect(),
            ),
            RuleKind::MonteCarlo { .. } => None,
        }
    }

    /// Forward-difference gradient of grid values with zero ghost values past
    /// the upper end of each axis (the piecewise-linear reconstruction of a
    /// function vanishing outside the box). Row-major `len x d` output.
    pub fn grid_gradient(&self, values: &[f64]) -> Result<Vec<f64>> {
        let RuleKind::TensorMidpoint { points_per_axis: m } = self.kind else {
            return Err(Error::invalid("grid gradients need a tensor-grid rule"));
        };
        if values.len() != self.len() {
            return Err(Error::Dimension(format!(
                "{} values for {} grid nodes",
                values.len(),
                self.len()
            )));
        }
        let d = self.dim();
        let spacing = self.spacing().expect("tensor rule");
        let mut grads = vec![0.0; self.len() * d];
        for j in 0..self.len() {
            for axis in 0..d {
                let stride = m.pow((d - 1 - axis) as u32);
                let idx = (j / stride) % m;
                let next = if idx + 1 < m { values[j + stride] } else { 0.0 };
                grads[j * d + axis] = (next - values[j]) / spacing[axis];
            }
        }
        Ok(grads)
    }

    /// Node field of grid values with [`grid_gradient`](Self::grid_gradient) gradients.
    pub fn grid_field(&self, values: Vec<f64>) -> Result<NodeField> {
        let grads = self.grid_gradient(&values)?;
        Ok(NodeField::with_grads(values, grads))
    }
}

/// Composite midpoint rule with `m^d` nodes. Node order is row-major with the
/// last axis fastest.
pub fn tensor_grid(domain: &BoxDomain, m: usize) -> Result<QuadratureRule> {
    if m < 2 {
        return Err(Error::invalid("tensor grid needs at least 2 points per axis"));
    }
    let d = domain.dim();
    let total = (m as u128).checked_pow(d as u32).unwrap_or(u128::MAX);
    if total > MAX_TENSOR_NODES {
        return Err(Error::invalid(format!("tensor grid with {m}^{d} nodes exceeds 1e8")));
    }
    let total = total as usize;
    let spacing: Vec<f64> = domain
        .lower
        .iter()
        .zip(&domain.upper)
        .map(|(l, u)| (u - l) / m as f64)
        .collect();
    let cell: f64 = spacing.iter().product();
    let mut nodes = Vec::with_capacity(total * d);
    for j in 0..total {
        for axis in 0..d {
            let stride = m.pow((d - 1 - axis) as u32);
            let idx = (j / stride) % m;
            nodes.push(domain.lower[axis] + (idx as f64 + 0.5) * spacing[axis]);
        }
    }
    Ok(QuadratureRule {
        domain: domain.clone(),
        nodes,
        weights: vec![cell; total],
        kind: RuleKind::TensorMidpoint { points_per_axis: m },
    })
}

/// `samples` i.i.d. uniform nodes, each weighted `volume / samples`.
pub fn monte_carlo(domain: &BoxDomain, samples: usize, seed: u64) -> Result<QuadratureRule> {
    if samples == 0 {
        return Err(Error::invalid("Monte Carlo rule needs at least one sample"));
    }
    let d = domain.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes = Vec::with_capacity(samples * d);
    for _ in 0..samples {
        for axis in 0..d {
            let u: f64 = rng.random();
            nodes.push(domain.lower[axis] + u * (domain.upper[axis] - domain.lower[axis]));
        }
    }
    Ok(QuadratureRule {
        domain: domain.clone(),
        nodes,
        weights: vec![domain.volume() / samples as f64; samples],
        kind: RuleKind::MonteCarlo { samples, seed },
    })
}

/// `sum_j w_j f(x_j)` in node order.
pub fn integrate(f: impl Fn(&[f64]) -> f64, rule: &QuadratureRule) -> Result<f64> {
    let mut total = 0.0;
    for (x, w) in rule.nodes().zip(rule.weights()) {
        let v = f(x);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("integrand is {v} at node {x:?}")));
        }
        total += w * v;
    }
    Ok(total)
}

/// Values (and optionally spatial gradients, row-major `len x d`) of a
/// function at the nodes of a rule.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeField {
    pub values: Vec<f64>,
    pub grads: Option<Vec<f64>>,
}

impl NodeField {
    pub fn values_only(values: Vec<f64>) -> Self {
        Self { values, grads: None }
    }

    pub fn with_grads(values: Vec<f64>, grads: Vec<f64>) -> Self {
        Self {
            values,
            grads: Some(grads),
        }
    }

    pub fn zeros(len: usize, dim: usize) -> Self {
        Self::with_grads(vec![0.0; len], vec![0.0; len * dim])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn grads_or_err(&self) -> Result<&[f64]> {
        self.grads
            .as_deref()
            .ok_or_else(|| Error::MissingData("inner product mode needs spatial gradients".into()))
    }

    /// `a * self + b * other`, gradients combined when both carry them.
    pub fn combine(&self, a: f64, other: &NodeField, b: f64) -> NodeField {
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(x, y)| a * x + b * y)
            .collect();
        let grads = match (&self.grads, &other.grads) {
            (Some(g), Some(h)) => Some(g.iter().zip(h).map(|(x, y)| a * x + b * y).collect()),
            _ => None,
        };
        NodeField { values, grads }
    }
}

/// Diffusion tensor and reaction coefficient sampled at the nodes of a rule.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeCoefficients {
    pub dim: usize,
    /// Row-major `d x d` block per node.
    pub diffusion: Vec<f64>,
    pub reaction: Vec<f64>,
}

impl NodeCoefficients {
    #[inline]
    pub fn diffusion_at(&self, j: usize) -> &[f64] {
        let dd = self.dim * self.dim;
        &self.diffusion[j * dd..(j + 1) * dd]
    }
}

/// Inner products used throughout the solver.
#[derive(Debug, Clone, Copy)]
pub enum InnerProduct<'a> {
    L2,
    /// `<u,v>_{L2} + <grad u, grad v>_{L2}`.
    H1,
    /// Weak form `int grad u^T A grad v + r u v`.
    AForm(&'a NodeCoefficients),
    /// `<u,v>_{L2} + h * a(u,v)`.
    Htilde(&'a NodeCoefficients, f64),
}

/// Quadrature realization of the chosen inner product.
pub fn inner_product(u: &NodeField, v: &NodeField, rule: &QuadratureRule, mode: InnerProduct<'_>) -> Result<f64> {
    let n = rule.len();
    if u.len() != n || v.len() != n {
        return Err(Error::Dimension(format!(
            "node fields of length {}/{} on a rule with {n} nodes",
            u.len(),
            v.len()
        )));
    }
    let w = rule.weights();
    let l2 = || -> f64 { (0..n).map(|j| w[j] * u.values[j] * v.values[j]).sum() };
    match mode {
        InnerProduct::L2 => Ok(l2()),
        InnerProduct::H1 => {
            let d = rule.dim();
            let (gu, gv) = (u.grads_or_err()?, v.grads_or_err()?);
            let mut total = 0.0;
            for j in 0..n {
                let mut s = u.values[j] * v.values[j];
                for k in 0..d {
                    s += gu[j * d + k] * gv[j * d + k];
                }
                total += w[j] * s;
            }
            Ok(total)
        }
        InnerProduct::AForm(coeffs) => a_form(u, v, rule, coeffs),
        InnerProduct::Htilde(coeffs, h) => {
            let a = if h == 0.0 { 0.0 } else { a_form(u, v, rule, coeffs)? };
            Ok(l2() + h * a)
        }
    }
}

fn a_form(u: &NodeField, v: &NodeField, rule: &QuadratureRule, coeffs: &NodeCoefficients) -> Result<f64> {
    let d = rule.dim();
    let n = rule.len();
    if coeffs.reaction.len() != n || coeffs.dim != d {
        return Err(Error::Dimension("operator coefficients do not match the rule".into()));
    }
    let (gu, gv) = (u.grads_or_err()?, v.grads_or_err()?);
    let w = rule.weights();
    let mut total = 0.0;
    for j in 0..n {
        let a = coeffs.diffusion_at(j);
        let mut s = coeffs.reaction[j] * u.values[j] * v.values[j];
        for p in 0..d {
            let mut row = 0.0;
            for q in 0..d {
                row += a[p * d + q] * gv[j * d + q];
            }
            s += gu[j * d + p] * row;
        }
        if !s.is_finite() {
            return Err(Error::NonFinite(format!("bilinear form integrand at node {j}")));
        }
        total += w[j] * s;
    }
    Ok(total)
}

/// `sqrt(<u,u>)` in the given mode.
pub fn norm(u: &NodeField, rule: &QuadratureRule, mode: InnerProduct<'_>) -> Result<f64> {
    Ok(inner_product(u, u, rule, mode)?.max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::BumpActivation;
    use proptest::prelude::*;

    #[test]
    fn midpoint_nodes_and_weights() {
        let rule = tensor_grid(&BoxDomain::new(vec![0.0], vec![1.0]).unwrap(), 4).unwrap();
        let xs: Vec<f64> = rule.nodes().map(|x| x[0]).collect();
        assert_eq!(xs, vec![0.125, 0.375, 0.625, 0.875]);
        assert!(rule.weights().iter().all(|&w| w == 0.25));
    }

    #[test]
    fn constants_integrate_exactly() {
        let dom = BoxDomain::new(vec![-2.0], vec![3.0]).unwrap();
        let rule = tensor_grid(&dom, 7).unwrap();
        assert!((integrate(|_| 1.0, &rule).unwrap() - 5.0).abs() < 1e-12);
        let mc = monte_carlo(&dom, 13, 1).unwrap();
        assert!((integrate(|_| 1.0, &mc).unwrap() - 5.0).abs() < 1e-12);
        let sum: f64 = mc.weights().iter().sum();
        assert!((sum - dom.volume()).abs() < 1e-10);
    }

    #[test]
    fn quadratic_and_midpoint_order() {
        let dom = BoxDomain::new(vec![0.0], vec![1.0]).unwrap();
        let r100 = tensor_grid(&dom, 100).unwrap();
        let e100 = (integrate(|x| x[0] * x[0], &r100).unwrap() - 1.0 / 3.0).abs();
        assert!(e100 < 1e-4);
        let r200 = tensor_grid(&dom, 200).unwrap();
        let e200 = (integrate(|x| x[0] * x[0], &r200).unwrap() - 1.0 / 3.0).abs();
        let ratio = e100 / e200;
        assert!((ratio - 4.0).abs() < 0.05, "ratio {ratio}");
    }

    #[test]
    fn rejects_bad_grids() {
        let dom = BoxDomain::symmetric(3, 1.0).unwrap();
        assert!(tensor_grid(&dom, 1).is_err());
        assert!(tensor_grid(&dom, 1000).is_err());
        assert!(monte_carlo(&dom, 0, 0).is_err());
        assert!(BoxDomain::new(vec![1.0], vec![1.0]).is_err());
    }

    #[test]
    fn monte_carlo_is_seeded() {
        let dom = BoxDomain::symmetric(2, 1.0).unwrap();
        assert_eq!(monte_carlo(&dom, 50, 9).unwrap(), monte_carlo(&dom, 50, 9).unwrap());
        assert_ne!(monte_carlo(&dom, 50, 9).unwrap(), monte_carlo(&dom, 50, 10).unwrap());
        let rule = monte_carlo(&dom, 50, 9).unwrap();
        assert!(rule.nodes().all(|x| dom.contains(x)));
    }

    #[test]
    fn bump_mass_by_monte_carlo() {
        let act = BumpActivation::new(1).unwrap();
        let dom = BoxDomain::symmetric(1, 1.0).unwrap();
        let n = 1_000_000;
        let rule = monte_carlo(&dom, n, 42).unwrap();
        let est = integrate(|x| act.eval(x), &rule).unwrap();
        let vals: Vec<f64> = rule.nodes().map(|x| 2.0 * act.eval(x)).collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let se = (var / n as f64).sqrt();
        assert!((est - 1.0).abs() < 3.0 * se, "{est} se {se}");
    }

    #[test]
    fn nodes_near_a_box_cover_it_in_order() {
        let rule = tensor_grid(&BoxDomain::new(vec![-1.0, 0.0], vec![1.0, 3.0]).unwrap(), 17).unwrap();
        let monte = monte_carlo(rule.domain(), 300, 2).unwrap();
        for r in [&rule, &monte] {
            let (lo, hi) = ([-0.3, 1.1], [0.45, 1.9]);
            let mut seen = Vec::new();
            r.for_each_node_near(&lo, &hi, |j, x| {
                assert_eq!(x, r.node(j));
                seen.push(j);
            });
            assert!(seen.windows(2).all(|w| w[0] < w[1]));
            for (j, x) in r.nodes().enumerate() {
                if (0..2).all(|k| x[k] >= lo[k] && x[k] <= hi[k]) {
                    assert!(seen.contains(&j));
                }
            }
        }
        let mut count = 0;
        rule.for_each_node_near(&[5.0, 5.0], &[6.0, 6.0], |_, _| count += 1);
        assert_eq!(count, 0);
    }

    #[test]
    fn grid_gradient_of_linear_ramp() {
        let dom = BoxDomain::new(vec![0.0, 0.0], vec![1.0, 2.0]).unwrap();
        let rule = tensor_grid(&dom, 4).unwrap();
        let values: Vec<f64> = rule.nodes().map(|x| 3.0 * x[0] + x[1]).collect();
        let g = rule.grid_gradient(&values).unwrap();
        // interior nodes see exact slopes
        let j = 4 + 1;
        assert!((g[j * 2] - 3.0).abs() < 1e-12);
        assert!((g[j * 2 + 1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn htilde_with_zero_step_is_l2() {
        let dom = BoxDomain::symmetric(1, 2.0).unwrap();
        let rule = tensor_grid(&dom, 16).unwrap();
        let u = rule.grid_field(rule.nodes().map(|x| x[0].sin()).collect()).unwrap();
        let v = rule.grid_field(rule.nodes().map(|x| x[0] * x[0]).collect()).unwrap();
        let coeffs = NodeCoefficients {
            dim: 1,
            diffusion: vec![1.0; 16],
            reaction: vec![0.0; 16],
        };
        let a = inner_product(&u, &v, &rule, InnerProduct::Htilde(&coeffs, 0.0)).unwrap();
        let b = inner_product(&u, &v, &rule, InnerProduct::L2).unwrap();
        assert_eq!(a, b);
        assert!(inner_product(&NodeField::values_only(u.values.clone()), &v, &rule, InnerProduct::H1).is_err());
    }

    proptest! {
        #[test]
        fn cauchy_schwarz_in_every_mode(
            a in proptest::collection::vec(-3.0f64..3.0, 12),
            b in proptest::collection::vec(-3.0f64..3.0, 12),
            kappa in 0.1f64..2.0, react in 0.0f64..1.0, h in 0.0f64..0.5,
        ) {
            let rule = tensor_grid(&BoxDomain::symmetric(1, 1.5).unwrap(), 12).unwrap();
            let u = rule.grid_field(a).unwrap();
            let v = rule.grid_field(b).unwrap();
            let coeffs = NodeCoefficients { dim: 1, diffusion: vec![kappa; 12], reaction: vec![react; 12] };
            for mode in [InnerProduct::L2, InnerProduct::H1, InnerProduct::AForm(&coeffs), InnerProduct::Htilde(&coeffs, h)] {
                let uv = inner_product(&u, &v, &rule, mode).unwrap();
                let vu = inner_product(&v, &u, &rule, mode).unwrap();
                prop_assert!((uv - vu).abs() < 1e-12);
                let nu = norm(&u, &rule, mode).unwrap();
                let nv = norm(&v, &rule, mode).unwrap();
                prop_assert!(uv.abs() <= nu * nv + 1e-12);
            }
        }
    }
}
