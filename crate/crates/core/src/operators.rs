//! Operator catalog. Each operator is split into a self-adjoint part
//! `L u = -div(A grad u) + r u`, handled through its weak form, and a
//! remainder `F` treated explicitly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::activation::BumpActivation;
use crate::error::{Error, Result};
use crate::field::Field;
use crate::quadrature::{inner_product, InnerProduct, NodeCoefficients, NodeField, QuadratureRule};
use crate::seeds::stage_seed;
use crate::shallow_net::{init_params, NetworkParams};

/// Coefficient families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OperatorKind {
    /// `A = kappa I`, no reaction or drift.
    Heat { kappa: f64 },
    /// Log-price Black–Scholes: `A = sigma^2/2`, reaction `r`, drift `sigma^2/2 - r`.
    BlackScholes { sigma: f64, r: f64 },
    /// Heston on `(S, V)`.
    Heston {
        r: f64,
        eta: f64,
        rho: f64,
        kappa_v: f64,
        theta: f64,
    },
    /// Basket diffusion `A = sigma^2/2 I` with constant drift; jumps live in
    /// [`OperatorSpec::jump`].
    Merton { sigma: f64, r: f64, b: Vec<f64> },
    /// `L = -Laplacian`, `F(u) = eps^-2 (u^3 - u)`.
    AllenCahn { epsilon: f64 },
    /// `L = 0`, `F = 0`; each step is a pure projection.
    Zero,
}

/// Normal jump-size law `z ~ N(mean, std^2 I)` with intensity `lambda`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpLaw {
    pub lambda: f64,
    pub mean: Vec<f64>,
    pub std: f64,
}

/// Frozen jump samples, row-major `count x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpSamples {
    pub dim: usize,
    pub z: Vec<f64>,
}

impl JumpSamples {
    pub fn len(&self) -> usize {
        self.z.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.z.chunks_exact(self.dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorSpec {
    dim: usize,
    kind: OperatorKind,
    jump: Option<JumpLaw>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstantSource {
    /// Closed-form constants from the operator's coefficients.
    Analytic,
    /// Fitted from trial functions.
    Empirical,
}

/// Continuity bound `M` and Gårding constants `(lambda1, lambda2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssumptionConstants {
    pub m: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub source: ConstantSource,
}

impl AssumptionConstants {
    /// Largest admissible step `1 / (2 lambda2)`, infinite when `lambda2 = 0`.
    pub fn max_step(&self) -> f64 {
        if self.lambda2 > 0.0 {
            0.5 / self.lambda2
        } else {
            f64::INFINITY
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} = {v} must be positive")))
    }
}

impl OperatorSpec {
    pub fn heat(kappa: f64, dim: usize) -> Result<Self> {
        positive("kappa", kappa)?;
        Self::checked(dim, OperatorKind::Heat { kappa }, None)
    }

    pub fn black_scholes(sigma: f64, r: f64) -> Result<Self> {
        positive("sigma", sigma)?;
        positive("r", r)?;
        Self::checked(1, OperatorKind::BlackScholes { sigma, r }, None)
    }

    pub fn heston(r: f64, eta: f64, rho: f64, kappa_v: f64, theta: f64) -> Result<Self> {
        positive("r", r)?;
        positive("eta", eta)?;
        positive("kappa_v", kappa_v)?;
        positive("theta", theta)?;
        if !(rho.abs() <= 1.0) {
            return Err(Error::invalid(format!("correlation rho = {rho} must lie in [-1, 1]")));
        }
        Self::checked(
            2,
            OperatorKind::Heston {
                r,
                eta,
                rho,
                kappa_v,
                theta,
            },
            None,
        )
    }

    pub fn merton(sigma: f64, r: f64, b: Vec<f64>, jump: JumpLaw) -> Result<Self> {
        positive("sigma", sigma)?;
        positive("r", r)?;
        positive("lambda", jump.lambda)?;
        positive("jump std", jump.std)?;
        let dim = b.len();
        if jump.mean.len() != dim {
            return Err(Error::Dimension("jump mean and drift differ in length".into()));
        }
        Self::checked(dim, OperatorKind::Merton { sigma, r, b }, Some(jump))
    }

    pub fn allen_cahn(epsilon: f64, dim: usize) -> Result<Self> {
        positive("epsilon", epsilon)?;
        Self::checked(dim, OperatorKind::AllenCahn { epsilon }, None)
    }

    pub fn zero(dim: usize) -> Result<Self> {
        Self::checked(dim, OperatorKind::Zero, None)
    }

    fn checked(dim: usize, kind: OperatorKind, jump: Option<JumpLaw>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("operator dimension must be positive"));
        }
        Ok(Self { dim, kind, jump })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &OperatorKind {
        &self.kind
    }

    pub fn jump(&self) -> Option<&JumpLaw> {
        self.jump.as_ref()
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            OperatorKind::Heat { .. } => "heat",
            OperatorKind::BlackScholes { .. } => "black_scholes",
            OperatorKind::Heston { .. } => "heston",
            OperatorKind::Merton { .. } => "merton",
            OperatorKind::AllenCahn { .. } => "allen_cahn",
            OperatorKind::Zero => "zero",
        }
    }

    /// Writes `A(x)` row-major into `out`.
    pub fn diffusion(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        out.iter_mut().for_each(|v| *v = 0.0);
        let diag = |out: &mut [f64], v: f64| (0..d).for_each(|k| out[k * d + k] = v);
        match &self.kind {
            OperatorKind::Heat { kappa } => diag(out, *kappa),
            OperatorKind::BlackScholes { sigma, .. } | OperatorKind::Merton { sigma, .. } => {
                diag(out, 0.5 * sigma * sigma)
            }
            OperatorKind::AllenCahn { .. } => diag(out, 1.0),
            OperatorKind::Zero => {}
            OperatorKind::Heston { eta, rho, .. } => {
                let (s, v) = (x[0], x[1]);
                out[0] = 0.5 * v * s * s;
                out[1] = 0.5 * v * eta * rho * s;
                out[2] = out[1];
                out[3] = 0.5 * v * eta * eta;
            }
        }
    }

    pub fn reaction(&self, _x: &[f64]) -> f64 {
        match &self.kind {
            OperatorKind::BlackScholes { r, .. } | OperatorKind::Heston { r, .. } | OperatorKind::Merton { r, .. } => *r,
            OperatorKind::Heat { .. } | OperatorKind::AllenCahn { .. } | OperatorKind::Zero => 0.0,
        }
    }

    /// Writes the drift `b(x)` into `out`.
    pub fn drift(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        match &self.kind {
            OperatorKind::BlackScholes { sigma, r } => out[0] = 0.5 * sigma * sigma - r,
            OperatorKind::Merton { b, .. } => out.copy_from_slice(b),
            OperatorKind::Heston {
                r,
                eta,
                rho,
                kappa_v,
                theta,
            } => {
                let (s, v) = (x[0], x[1]);
                out[0] = (v - r + 0.5 * rho * eta) * s;
                out[1] = kappa_v * (v - theta) + 0.5 * eta * rho * v + 0.5 * eta * eta;
            }
            OperatorKind::Heat { .. } | OperatorKind::AllenCahn { .. } | OperatorKind::Zero => {}
        }
    }


    /// `A` and `r` at every node of `rule`.
    pub fn coefficients_at(&self, rule: &QuadratureRule) -> Result<NodeCoefficients> {
        self.check_rule(rule)?;
        let d = self.dim;
        let mut diffusion = vec![0.0; rule.len() * d * d];
        let mut reaction = Vec::with_capacity(rule.len());
        for (j, x) in rule.nodes().enumerate() {
            self.diffusion(x, &mut diffusion[j * d * d..(j + 1) * d * d]);
            reaction.push(self.reaction(x));
        }
        Ok(NodeCoefficients {
            dim: d,
            diffusion,
            reaction,
        })
    }

    fn check_rule(&self, rule: &QuadratureRule) -> Result<()> {
        if rule.dim() != self.dim {
            return Err(Error::Dimension(format!(
                "{}-dimensional operator on a {}-dimensional rule",
                self.dim,
                rule.dim()
            )));
        }
        Ok(())
    }

    /// Jump sizes drawn once per run and reused across all gradient steps.
    pub fn sample_jumps(&self, count: usize, seed: u64) -> Result<Option<JumpSamples>> {
        let Some(law) = &self.jump else {
            return Ok(None);
        };
        if count == 0 {
            return Err(Error::invalid("jump operator needs at least one sample"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z = Vec::with_capacity(count * self.dim);
        for _ in 0..count {
            for k in 0..self.dim {
                let g: f64 = StandardNormal.sample(&mut rng);
                z.push(law.mean[k] + law.std * g);
            }
        }
        Ok(Some(JumpSamples { dim: self.dim, z }))
    }

    /// `a(u, v) = int grad u^T A grad v + r u v` over the rule.
    pub fn bilinear_a(&self, u: &NodeField, v: &NodeField, rule: &QuadratureRule) -> Result<f64> {
        let coeffs = self.coefficients_at(rule)?;
        inner_product(u, v, rule, InnerProduct::AForm(&coeffs))
    }

    /// Monte-Carlo jump integral `lambda mean_j [u(x e^{z_j}) - u(x)]` and its
    /// standard error.
    pub fn jump_integral(&self, u: &dyn Field, x: &[f64], jumps: &JumpSamples) -> Result<(f64, f64)> {
        let law = self
            .jump
            .as_ref()
            .ok_or_else(|| Error::invalid("operator has no jump component"))?;
        if jumps.is_empty() {
            return Err(Error::MissingData("jump operator evaluated without samples".into()));
        }
        let ux = u.value(x);
        let mut y = vec![0.0; x.len()];
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for z in jumps.iter() {
            for k in 0..x.len() {
                y[k] = x[k] * z[k].exp();
            }
            let diff = u.value(&y) - ux;
            sum += diff;
            sum_sq += diff * diff;
        }
        let m = jumps.len() as f64;
        let mean = sum / m;
        let var = if m > 1.0 { (sum_sq - m * mean * mean).max(0.0) / (m - 1.0) } else { 0.0 };
        Ok((law.lambda * mean, law.lambda * (var / m).sqrt()))
    }

    /// `F(u)(x)`: drift, jump and nonlinear reaction contributions.
    pub fn apply_f(&self, u: &dyn Field, x: &[f64], jumps: Option<&JumpSamples>) -> Result<f64> {
        let d = self.dim;
        let mut g = vec![0.0; d];
        u.gradient(x, &mut g);
        self.apply_f_with(u, x, u.value(x), &g, jumps)
    }

    fn apply_f_with(&self, u: &dyn Field, x: &[f64], value: f64, grad: &[f64], jumps: Option<&JumpSamples>) -> Result<f64> {
        let mut b = vec![0.0; self.dim];
        self.drift(x, &mut b);
        let mut out: f64 = b.iter().zip(grad).map(|(p, q)| p * q).sum();
        if let OperatorKind::AllenCahn { epsilon } = self.kind {
            out += (value * value * value - value) / (epsilon * epsilon);
        }
        if self.jump.is_some() {
            let jumps = jumps.ok_or_else(|| Error::MissingData("jump operator evaluated without samples".into()))?;
            out -= self.jump_integral(u, x, jumps)?.0;
        }
        if !out.is_finite() {
            return Err(Error::NonFinite(format!("F(u) at {x:?}")));
        }
        Ok(out)
    }

    /// `F(u)` at every node, reusing precomputed node values and gradients.
    pub fn apply_f_nodes(&self, u: &dyn Field, nf: &NodeField, rule: &QuadratureRule, jumps: Option<&JumpSamples>) -> Result<Vec<f64>> {
        self.check_rule(rule)?;
        let d = self.dim;
        let grads = nf
            .grads
            .as_deref()
            .ok_or_else(|| Error::MissingData("F needs spatial gradients".into()))?;
        rule.nodes()
            .enumerate()
            .map(|(j, x)| self.apply_f_with(u, x, nf.values[j], &grads[j * d..(j + 1) * d], jumps))
            .collect()
    }

    /// Jump part `lambda mean_j [u(x e^{z_j}) - u(x)]` at every node.
    pub fn jump_part_nodes(&self, u: &dyn Field, rule: &QuadratureRule, jumps: &JumpSamples) -> Result<Vec<f64>> {
        rule.nodes().map(|x| Ok(self.jump_integral(u, x, jumps)?.0)).collect()
    }

    /// Constants that follow directly from the coefficients, where available.
    pub fn analytic_constants(&self) -> Option<AssumptionConstants> {
        match &self.kind {
            OperatorKind::Heat { kappa } => Some(AssumptionConstants {
                m: *kappa,
                lambda1: *kappa,
                lambda2: *kappa,
                source: ConstantSource::Analytic,
            }),
            OperatorKind::BlackScholes { sigma, r } => {
                let a = 0.5 * sigma * sigma;
                Some(AssumptionConstants {
                    m: a + r.abs(),
                    lambda1: a.min(*r),
                    lambda2: 0.0,
                    source: ConstantSource::Analytic,
                })
            }
            OperatorKind::Merton { sigma, r, .. } => {
                let a = 0.5 * sigma * sigma;
                Some(AssumptionConstants {
                    m: a + r.abs(),
                    lambda1: a.min(*r),
                    lambda2: 0.0,
                    source: ConstantSource::Analytic,
                })
            }
            OperatorKind::AllenCahn { .. } => Some(AssumptionConstants {
                m: 1.0,
                lambda1: 1.0,
                lambda2: 1.0,
                source: ConstantSource::Analytic,
            }),
            OperatorKind::Heston { .. } | OperatorKind::Zero => None,
        }
    }

    /// Gårding constants implied by the smallest eigenvalue of `A` and the
    /// smallest reaction over the rule's nodes; `None` when `A` degenerates.
    pub fn coefficient_garding(&self, rule: &QuadratureRule) -> Result<Option<(f64, f64)>> {
        let coeffs = self.coefficients_at(rule)?;
        let d = self.dim;
        let mut min_eig = f64::INFINITY;
        let mut min_r = f64::INFINITY;
        for j in 0..rule.len() {
            let a = nalgebra::DMatrix::from_row_slice(d, d, coeffs.diffusion_at(j));
            let e = a.symmetric_eigenvalues().min();
            min_eig = min_eig.min(e);
            min_r = min_r.min(coeffs.reaction[j]);
        }
        if !(min_eig > 0.0) {
            return Ok(None);
        }
        Ok(Some((min_eig, (min_eig - min_r).max(0.0))))
    }

    /// Fits `M`, `lambda1`, `lambda2` from trial functions given by their node
    /// values and gradients.
    ///
    /// `M` is the largest ratio `|a(u,v)| / (|u|_{H1} |v|_{H1})` over all
    /// pairs. For the Gårding pair, each trial gives
    /// `p = |u|_{L2}^2 / |u|_{H1}^2` and `q = a(u,u) / |u|_{H1}^2`; a least
    /// squares line `q ~ c0 + beta p` fixes the slope, `lambda2 = max(-beta, 0)`
    /// and `lambda1` is the largest intercept keeping every trial above the
    /// line.
    pub fn estimate_constants(&self, trials: &[NodeField], rule: &QuadratureRule) -> Result<AssumptionConstants> {
        let coeffs = self.coefficients_at(rule)?;
        let nonzero: Vec<&NodeField> = trials.iter().filter(|t| t.values.iter().any(|v| *v != 0.0)).collect();
        if nonzero.len() < 50 {
            return Err(Error::invalid(format!(
                "constant estimation needs at least 50 nonzero trial functions, got {}",
                nonzero.len()
            )));
        }
        let t = nonzero.len();
        let mut h1 = Vec::with_capacity(t);
        let mut l2 = Vec::with_capacity(t);
        for u in &nonzero {
            h1.push(inner_product(u, u, rule, InnerProduct::H1)?);
            l2.push(inner_product(u, u, rule, InnerProduct::L2)?);
        }
        let mut m = 0.0f64;
        let mut diag = vec![0.0; t];
        for i in 0..t {
            for j in i..t {
                let a = inner_product(nonzero[i], nonzero[j], rule, InnerProduct::AForm(&coeffs))?;
                if i == j {
                    diag[i] = a;
                }
                m = m.max(a.abs() / (h1[i] * h1[j]).sqrt());
            }
        }
        let p: Vec<f64> = (0..t).map(|i| l2[i] / h1[i]).collect();
        let q: Vec<f64> = (0..t).map(|i| diag[i] / h1[i]).collect();
        let pm = p.iter().sum::<f64>() / t as f64;
        let qm = q.iter().sum::<f64>() / t as f64;
        let sxx: f64 = p.iter().map(|v| (v - pm).powi(2)).sum();
        let sxy: f64 = p.iter().zip(&q).map(|(a, b)| (a - pm) * (b - qm)).sum();
        let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
        let lambda1 = p
            .iter()
            .zip(&q)
            .map(|(pi, qi)| qi - slope * pi)
            .fold(f64::INFINITY, f64::min);
        let lambda2 = (-slope).max(0.0);
        if !(lambda1 > 0.0) || !m.is_finite() {
            return Err(Error::Assumption(format!(
                "no positive Gårding constant on the trial set (lambda1 = {lambda1:.3e})"
            )));
        }
        Ok(AssumptionConstants {
            m,
            lambda1,
            lambda2,
            source: ConstantSource::Empirical,
        })
    }
}

/// `count` random networks of width `width` drawn from the initialization
/// law, for constant estimation and assumption checks.
pub fn trial_networks(dim: usize, count: usize, width: usize, seed: u64) -> Result<Vec<NetworkParams>> {
    let r = (width as f64).ln();
    (0..count)
        .map(|i| init_params(width, dim, 0.75, r, stage_seed(seed, "trial", i as u64)))
        .collect()
}

/// Node fields of [`trial_networks`].
pub fn trial_fields(act: &BumpActivation, rule: &QuadratureRule, count: usize, width: usize, seed: u64) -> Result<Vec<NodeField>> {
    Ok(trial_networks(act.dim(), count, width, seed)?
        .iter()
        .map(|net| net.forward(act, rule))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{BumpSum, FnField};
    use crate::quadrature::{tensor_grid, BoxDomain};

    fn grid1(m: usize, hw: f64) -> QuadratureRule {
        tensor_grid(&BoxDomain::symmetric(1, hw).unwrap(), m).unwrap()
    }

    #[test]
    fn heat_split() {
        let op = OperatorSpec::heat(2.0, 2).unwrap();
        let mut a = [0.0; 4];
        op.diffusion(&[0.3, 0.1], &mut a);
        assert_eq!(a, [2.0, 0.0, 0.0, 2.0]);
        let mut b = [1.0; 2];
        op.drift(&[0.3, 0.1], &mut b);
        assert_eq!(b, [0.0, 0.0]);
        assert_eq!(op.reaction(&[0.0, 0.0]), 0.0);
        assert!(op.jump().is_none());
        assert!(OperatorSpec::heat(-1.0, 1).is_err());
    }

    #[test]
    fn black_scholes_split_and_cancellation() {
        let op = OperatorSpec::black_scholes(0.4, 0.05).unwrap();
        let mut b = [0.0];
        op.drift(&[0.0], &mut b);
        assert!((b[0] - 0.03).abs() < 1e-15);
        let sigma = (2.0f64 * 0.05).sqrt();
        let cancel = OperatorSpec::black_scholes(sigma, 0.5 * sigma * sigma).unwrap();
        let act = BumpActivation::new(1).unwrap();
        let u = BumpSum::unit(act);
        assert_eq!(cancel.apply_f(&u, &[0.2], None).unwrap(), 0.0);
    }

    #[test]
    fn heston_matrix() {
        let (eta, rho) = (0.3, -0.5);
        let op = OperatorSpec::heston(0.02, eta, rho, 1.5, 0.04).unwrap();
        let (s, v) = (1.2, 0.09);
        let mut a = [0.0; 4];
        op.diffusion(&[s, v], &mut a);
        let expect = [v / 2.0 * s * s, v / 2.0 * eta * rho * s, v / 2.0 * eta * rho * s, v / 2.0 * eta * eta];
        for k in 0..4 {
            assert!((a[k] - expect[k]).abs() < 1e-15);
        }
        assert!((a[1] - a[2]).abs() < 1e-12);
        let mut b = [0.0; 2];
        op.drift(&[s, v], &mut b);
        assert!((b[0] - (v - 0.02 + 0.5 * rho * eta) * s).abs() < 1e-15);
        assert!((b[1] - (1.5 * (v - 0.04) + 0.5 * eta * rho * v + 0.5 * eta * eta)).abs() < 1e-15);
        assert!(OperatorSpec::heston(0.02, 0.3, 1.5, 1.0, 0.04).is_err());
    }

    #[test]
    fn bilinear_form_against_dense_oracle() {
        let act = BumpActivation::new(1).unwrap();
        let u = BumpSum::unit(act);
        let rule = grid1(4000, 1.0);
        let nf = u.node_field(&rule);
        let op = OperatorSpec::heat(1.0, 1).unwrap();
        let a = op.bilinear_a(&nf, &nf, &rule).unwrap();
        // independent oracle: 10^5-node trapezoid of (w')^2 on [-1, 1]
        let n = 100_000;
        let step = 2.0 / n as f64;
        let oracle: f64 = (0..=n)
            .map(|i| {
                let x = -1.0 + i as f64 * step;
                let g = act.grad_vec(&[x])[0];
                let wgt = if i == 0 || i == n { 0.5 } else { 1.0 };
                wgt * g * g * step
            })
            .sum();
        assert!((a - oracle).abs() < 1e-6 * oracle, "{a} vs {oracle}");
        let zero = NodeField::zeros(rule.len(), 1);
        assert_eq!(op.bilinear_a(&nf, &zero, &rule).unwrap(), 0.0);
    }

    #[test]
    fn bilinear_form_is_symmetric() {
        let act = BumpActivation::new(2).unwrap();
        let rule = tensor_grid(&BoxDomain::new(vec![0.2, 0.01], vec![3.0, 0.5]).unwrap(), 24).unwrap();
        let op = OperatorSpec::heston(0.03, 0.4, -0.6, 2.0, 0.05).unwrap();
        let fields = trial_fields(&act, &rule, 6, 16, 3).unwrap();
        for u in &fields {
            for v in &fields {
                let a = op.bilinear_a(u, v, &rule).unwrap();
                let b = op.bilinear_a(v, u, &rule).unwrap();
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn drift_and_jump_vanish_on_locally_constant_function() {
        let law = JumpLaw {
            lambda: 0.7,
            mean: vec![0.0],
            std: 0.01,
        };
        let op = OperatorSpec::merton(0.2, 0.03, vec![0.4], law).unwrap();
        let jumps = op.sample_jumps(200, 1).unwrap().unwrap();
        let u = FnField::new(1, |_: &[f64]| 3.0, |_: &[f64], g: &mut [f64]| g[0] = 0.0);
        assert_eq!(op.apply_f(&u, &[0.5], Some(&jumps)).unwrap(), 0.0);
        assert!(op.apply_f(&u, &[0.5], None).is_err());
        let empty = JumpSamples { dim: 1, z: vec![] };
        assert!(op.apply_f(&u, &[0.5], Some(&empty)).is_err());
    }

    #[test]
    fn jump_samples_are_seeded() {
        let law = JumpLaw {
            lambda: 0.5,
            mean: vec![0.0, 0.1],
            std: 1.0,
        };
        let op = OperatorSpec::merton(0.2, 0.03, vec![0.0, 0.0], law).unwrap();
        let a = op.sample_jumps(50, 9).unwrap().unwrap();
        assert_eq!(a, op.sample_jumps(50, 9).unwrap().unwrap());
        assert_ne!(a, op.sample_jumps(50, 10).unwrap().unwrap());
        assert!(OperatorSpec::heat(1.0, 1).unwrap().sample_jumps(5, 1).unwrap().is_none());
    }

    #[test]
    fn allen_cahn_remainder() {
        let op = OperatorSpec::allen_cahn(0.5, 1).unwrap();
        let u = FnField::new(1, |_: &[f64]| 2.0, |_: &[f64], g: &mut [f64]| g[0] = 0.0);
        assert!((op.apply_f(&u, &[0.0], None).unwrap() - 4.0 * 6.0).abs() < 1e-12);
    }

    #[test]
    fn heat_constants_recover_exact_garding_line() {
        let act = BumpActivation::new(1).unwrap();
        let rule = grid1(1200, 12.0);
        let op = OperatorSpec::heat(1.0, 1).unwrap();
        let trials = trial_fields(&act, &rule, 60, 16, 100).unwrap();
        let c = op.estimate_constants(&trials, &rule).unwrap();
        assert!(c.lambda1 > 0.0 && c.lambda1 <= 1.0 + 1e-9, "{c:?}");
        assert!((c.lambda2 - 1.0).abs() < 1e-9);
        assert!(c.m <= 1.0 + 1e-12);
        let held_out = trial_fields(&act, &rule, 40, 16, 10_000).unwrap();
        for u in &held_out {
            let a = op.bilinear_a(u, u, &rule).unwrap();
            let h1 = inner_product(u, u, &rule, InnerProduct::H1).unwrap();
            let l2 = inner_product(u, u, &rule, InnerProduct::L2).unwrap();
            assert!(a >= c.lambda1 * h1 - c.lambda2 * l2 - 1e-12 * h1);
        }
        assert!(op.estimate_constants(&trials[..10], &rule).is_err());
    }

    #[test]
    fn coefficient_garding_for_heat() {
        let rule = grid1(10, 1.0);
        let (l1, l2) = OperatorSpec::heat(2.0, 1).unwrap().coefficient_garding(&rule).unwrap().unwrap();
        assert_eq!((l1, l2), (2.0, 2.0));
    }
}
