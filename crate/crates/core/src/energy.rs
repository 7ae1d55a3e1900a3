//! Per-step energy
//! `I(u) = 1/2 |u - U|^2 + h/2 a(u,u) + h <F(U), u>` and its exact
//! parameter gradient for bump networks.

use crate::activation::BumpActivation;
use crate::error::{Error, Result};
use crate::field::Field;
use crate::operators::{AssumptionConstants, JumpSamples, OperatorSpec};
use crate::quadrature::{NodeCoefficients, NodeField, QuadratureRule};
use crate::shallow_net::{affine_inside, fill_spatial_rows, support_box, ClipMask, NetworkParams};

/// Everything one backward-Euler step needs, with the previous iterate and
/// `F` of it cached at the nodes.
#[derive(Debug, Clone)]
pub struct EnergyContext {
    spec: OperatorSpec,
    rule: QuadratureRule,
    h: f64,
    coeffs: NodeCoefficients,
    prev: NodeField,
    f_prev: Vec<f64>,
    jumps: Option<JumpSamples>,
}

impl EnergyContext {
    /// Builds a context from an evaluable previous iterate.
    pub fn new(spec: OperatorSpec, rule: QuadratureRule, h: f64, prev: &dyn Field, jumps: Option<JumpSamples>) -> Result<Self> {
        if prev.dim() != rule.dim() {
            return Err(Error::Dimension("previous iterate and rule differ in dimension".into()));
        }
        if spec.jump().is_some() && jumps.as_ref().is_none_or(|j| j.is_empty()) {
            return Err(Error::MissingData("jump operator needs frozen jump samples".into()));
        }
        let nf = prev.node_field(&rule);
        let f_prev = spec.apply_f_nodes(prev, &nf, &rule, jumps.as_ref())?;
        Self::from_nodes(spec, rule, h, nf, f_prev, jumps)
    }

    /// Builds a context from node data directly (grid functions).
    pub fn from_nodes(
        spec: OperatorSpec,
        rule: QuadratureRule,
        h: f64,
        prev: NodeField,
        f_prev: Vec<f64>,
        jumps: Option<JumpSamples>,
    ) -> Result<Self> {
        if !(h >= 0.0) || !h.is_finite() {
            return Err(Error::invalid(format!("time step h = {h} must be non-negative")));
        }
        let n = rule.len();
        if prev.len() != n || f_prev.len() != n || prev.grads.as_ref().is_none_or(|g| g.len() != n * rule.dim()) {
            return Err(Error::Dimension("cached node data does not match the rule".into()));
        }
        if prev.values.iter().chain(&f_prev).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("previous iterate or F(U) at the nodes".into()));
        }
        let coeffs = spec.coefficients_at(&rule)?;
        Ok(Self {
            spec,
            rule,
            h,
            coeffs,
            prev,
            f_prev,
            jumps,
        })
    }

    /// Rejects steps outside `0 < h < 1 / (2 lambda2)`.
    pub fn check_step(&self, constants: &AssumptionConstants) -> Result<()> {
        if self.h < constants.max_step() {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "time step h = {} violates h < 1/(2 lambda2) = {}",
                self.h,
                constants.max_step()
            )))
        }
    }

    pub fn spec(&self) -> &OperatorSpec {
        &self.spec
    }

    pub fn rule(&self) -> &QuadratureRule {
        &self.rule
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn coefficients(&self) -> &NodeCoefficients {
        &self.coeffs
    }

    pub fn prev(&self) -> &NodeField {
        &self.prev
    }

    pub fn f_prev(&self) -> &[f64] {
        &self.f_prev
    }

    pub fn jumps(&self) -> Option<&JumpSamples> {
        self.jumps.as_ref()
    }

    fn check_field<'a>(&self, v: &'a NodeField) -> Result<&'a [f64]> {
        if v.len() != self.rule.len() {
            return Err(Error::Dimension("node field does not match the rule".into()));
        }
        v.grads
            .as_deref()
            .ok_or_else(|| Error::MissingData("energy needs spatial gradients".into()))
    }

    /// `I` evaluated from node values and gradients of `v`.
    pub fn loss_nodes(&self, v: &NodeField) -> Result<f64> {
        let gv = self.check_field(v)?;
        let d = self.rule.dim();
        let w = self.rule.weights();
        let mut total = 0.0;
        for j in 0..self.rule.len() {
            let vj = v.values[j];
            let diff = vj - self.prev.values[j];
            let a = self.coeffs.diffusion_at(j);
            let g = &gv[j * d..(j + 1) * d];
            let mut quad = self.coeffs.reaction[j] * vj * vj;
            for p in 0..d {
                for q in 0..d {
                    quad += g[p] * a[p * d + q] * g[q];
                }
            }
            let s = 0.5 * diff * diff + 0.5 * self.h * quad + self.h * self.f_prev[j] * vj;
            total += w[j] * s;
        }
        if !total.is_finite() {
            return Err(Error::NonFinite("energy functional".into()));
        }
        Ok(total)
    }

    /// `I(a) - I(b)`, summed node by node so the constant term never enters.
    pub fn loss_difference(&self, a: &NodeField, b: &NodeField) -> Result<f64> {
        let ga = self.check_field(a)?;
        let gb = self.check_field(b)?;
        let d = self.rule.dim();
        let w = self.rule.weights();
        let mut total = 0.0;
        for j in 0..self.rule.len() {
            let (va, vb) = (a.values[j], b.values[j]);
            let dv = va - vb;
            let coef = self.coeffs.diffusion_at(j);
            let mut quad = self.coeffs.reaction[j] * dv * (va + vb);
            for p in 0..d {
                let dp = ga[j * d + p] - gb[j * d + p];
                for q in 0..d {
                    quad += dp * coef[p * d + q] * (ga[j * d + q] + gb[j * d + q]);
                }
            }
            let s = 0.5 * dv * (va + vb - 2.0 * self.prev.values[j]) + 0.5 * self.h * quad + self.h * self.f_prev[j] * dv;
            total += w[j] * s;
        }
        if !total.is_finite() {
            return Err(Error::NonFinite("energy difference".into()));
        }
        Ok(total)
    }

    pub fn loss(&self, net: &NetworkParams, act: &BumpActivation) -> Result<f64> {
        self.loss_nodes(&net.forward(act, &self.rule))
    }

    /// `<DI(v), u> = <v - U, u> + h a(v, u) + h <F(U), u>`.
    pub fn frechet_pair(&self, v: &NodeField, u: &NodeField) -> Result<f64> {
        let gv = self.check_field(v)?;
        let gu = self.check_field(u)?;
        let d = self.rule.dim();
        let w = self.rule.weights();
        let mut total = 0.0;
        for j in 0..self.rule.len() {
            let a = self.coeffs.diffusion_at(j);
            let mut form = self.coeffs.reaction[j] * v.values[j] * u.values[j];
            for p in 0..d {
                for q in 0..d {
                    form += gv[j * d + p] * a[p * d + q] * gu[j * d + q];
                }
            }
            let s = (v.values[j] - self.prev.values[j]) * u.values[j] + self.h * form + self.h * self.f_prev[j] * u.values[j];
            total += w[j] * s;
        }
        Ok(total)
    }

    /// Loss and its gradient with respect to the raw parameters, flat in the
    /// layout of [`NetworkParams::flat`].
    pub fn loss_and_grad(&self, net: &NetworkParams, act: &BumpActivation) -> Result<(f64, Vec<f64>)> {
        let nf = net.forward(act, &self.rule);
        let loss = self.loss_nodes(&nf)?;
        let d = self.rule.dim();
        let n_nodes = self.rule.len();
        let w = self.rule.weights();
        let gv = nf.grads.as_deref().expect("forward returns gradients");

        // Each gradient component is sum_j e_j dV_j + g_j . grad dV_j.
        let mut e = vec![0.0; n_nodes];
        let mut g = vec![0.0; n_nodes * d];
        for j in 0..n_nodes {
            let v = nf.values[j];
            e[j] = w[j] * (v - self.prev.values[j] + self.h * self.f_prev[j] + self.h * self.coeffs.reaction[j] * v);
            let a = self.coeffs.diffusion_at(j);
            for p in 0..d {
                let mut s = 0.0;
                for q in 0..d {
                    s += a[p * d + q] * gv[j * d + q];
                }
                g[j * d + p] = self.h * w[j] * s;
            }
        }

        let scale = net.scale();
        let stride = 2 + d;
        let mut grad = vec![0.0; net.param_count()];
        let mut z = vec![0.0; d];
        let mut dpsi = vec![0.0; d];
        let mut hess = vec![0.0; d * d];
        let mut rows = vec![0.0; stride * d];
        let mut acc = vec![0.0; stride];
        let (mut lo, mut hi) = (vec![0.0; d], vec![0.0; d]);
        for (i, p) in net.neurons.iter().enumerate() {
            let q = net.clipped(i);
            let mask = ClipMask::of(p, net.clip_radius());
            if !mask.beta && !mask.alpha && !mask.c.iter().any(|&m| m) {
                continue;
            }
            acc.iter_mut().for_each(|v| *v = 0.0);
            support_box(&q, &mut lo, &mut hi);
            self.rule.for_each_node_near(&lo, &hi, |j, x| {
                if !affine_inside(&q, x, &mut z) {
                    return;
                }
                let psi = act.eval_all(&z, &mut dpsi, &mut hess, true);
                let x_dot: f64 = x.iter().zip(&dpsi).map(|(a, b)| a * b).sum();
                fill_spatial_rows(&q, &mask, x, &dpsi, &hess, &mut rows);
                let ej = e[j];
                let gj = &g[j * d..(j + 1) * d];
                let dot = |r: usize| -> f64 { (0..d).map(|k| gj[k] * rows[r * d + k]).sum() };
                if mask.beta {
                    acc[0] += ej * psi + dot(0);
                }
                if mask.alpha {
                    acc[1] += ej * q.beta * x_dot + dot(1);
                }
                for k in 0..d {
                    if mask.c[k] {
                        acc[2 + k] += ej * q.beta * dpsi[k] + dot(2 + k);
                    }
                }
            });
            for k in 0..stride {
                grad[i * stride + k] = scale * acc[k];
            }
        }
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter gradient".into()));
        }
        Ok((loss, grad))
    }

    pub fn loss_grad(&self, net: &NetworkParams, act: &BumpActivation) -> Result<Vec<f64>> {
        Ok(self.loss_and_grad(net, act)?.1)
    }
}

/// Euclidean norm.
pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{BumpSum, BumpTerm, ZeroField};
    use crate::quadrature::{inner_product, tensor_grid, BoxDomain, InnerProduct};
    use crate::shallow_net::{init_params, NeuronParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(h: f64) -> (BumpActivation, EnergyContext) {
        let act = BumpActivation::new(1).unwrap();
        let rule = tensor_grid(&BoxDomain::symmetric(1, 4.0).unwrap(), 400).unwrap();
        let u0 = BumpSum::unit(act);
        let ctx = EnergyContext::new(OperatorSpec::heat(1.0, 1).unwrap(), rule, h, &u0, None).unwrap();
        (act, ctx)
    }

    #[test]
    fn zero_network_leaves_constant_term() {
        let (act, ctx) = setup(0.05);
        let mut net = init_params(32, 1, 0.75, 3.0, 1).unwrap();
        net.neurons.iter_mut().for_each(|p| p.beta = 0.0);
        let l = ctx.loss(&net, &act).unwrap();
        let u2 = inner_product(ctx.prev(), ctx.prev(), ctx.rule(), InnerProduct::L2).unwrap();
        assert!((l - 0.5 * u2).abs() < 1e-15);
    }

    #[test]
    fn zero_step_is_projection_and_previous_iterate_gives_form() {
        let (act, ctx) = setup(0.0);
        let net = init_params(32, 1, 0.75, 3.0, 2).unwrap();
        let nf = net.forward(&act, ctx.rule());
        let diff = nf.combine(1.0, ctx.prev(), -1.0);
        let half = 0.5 * inner_product(&diff, &diff, ctx.rule(), InnerProduct::L2).unwrap();
        assert!((ctx.loss_nodes(&nf).unwrap() - half).abs() < 1e-14);

        let (_, ctx) = setup(0.1);
        let prev = ctx.prev().clone();
        let a = ctx.spec().bilinear_a(&prev, &prev, ctx.rule()).unwrap();
        assert!((ctx.loss_nodes(&prev).unwrap() - 0.05 * a).abs() < 1e-14);
        let u = net.forward(&act, ctx.rule());
        let pair = ctx.frechet_pair(&prev, &u).unwrap();
        let form = ctx.spec().bilinear_a(&prev, &u, ctx.rule()).unwrap();
        assert!((pair - 0.1 * form).abs() < 1e-14);
        assert_eq!(ctx.frechet_pair(&prev, &NodeField::zeros(prev.len(), 1)).unwrap(), 0.0);
    }

    #[test]
    fn directional_derivative_matches_pair() {
        let act = BumpActivation::new(1).unwrap();
        let rule = tensor_grid(&BoxDomain::symmetric(1, 4.0).unwrap(), 300).unwrap();
        let law = crate::operators::JumpLaw {
            lambda: 0.5,
            mean: vec![0.0],
            std: 0.3,
        };
        let spec = OperatorSpec::merton(0.3, 0.04, vec![0.1], law).unwrap();
        let jumps = spec.sample_jumps(64, 3).unwrap();
        let u0 = BumpSum::unit(act);
        let ctx = EnergyContext::new(spec, rule, 0.05, &u0, jumps).unwrap();
        let v = init_params(16, 1, 0.75, 2.7, 4).unwrap().forward(&act, ctx.rule());
        let u = init_params(16, 1, 0.75, 2.7, 5).unwrap().forward(&act, ctx.rule());
        let pair = ctx.frechet_pair(&v, &u).unwrap();
        let mut errs = vec![];
        for tau in [1e-3, 1e-4] {
            let plus = ctx.loss_nodes(&v.combine(1.0, &u, tau)).unwrap();
            let minus = ctx.loss_nodes(&v.combine(1.0, &u, -tau)).unwrap();
            errs.push(((plus - minus) / (2.0 * tau) - pair).abs());
        }
        // the energy is quadratic, so central differences are exact up to rounding
        assert!(errs.iter().all(|e| *e < 1e-8 * pair.abs().max(1.0)), "{errs:?}");
    }

    #[test]
    fn loss_difference_matches_plain_difference() {
        let (act, ctx) = setup(0.05);
        let a = init_params(16, 1, 0.75, 2.7, 1).unwrap().forward(&act, ctx.rule());
        let b = init_params(16, 1, 0.75, 2.7, 2).unwrap().forward(&act, ctx.rule());
        let plain = ctx.loss_nodes(&a).unwrap() - ctx.loss_nodes(&b).unwrap();
        assert!((ctx.loss_difference(&a, &b).unwrap() - plain).abs() < 1e-14);
        assert_eq!(ctx.loss_difference(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn pair_is_linear_in_direction() {
        let (act, ctx) = setup(0.07);
        let v = init_params(16, 1, 0.75, 2.7, 7).unwrap().forward(&act, ctx.rule());
        let u1 = init_params(16, 1, 0.75, 2.7, 8).unwrap().forward(&act, ctx.rule());
        let u2 = init_params(16, 1, 0.75, 2.7, 9).unwrap().forward(&act, ctx.rule());
        let (a, b) = (0.3, -1.7);
        let lhs = ctx.frechet_pair(&v, &u1.combine(a, &u2, b)).unwrap();
        let rhs = a * ctx.frechet_pair(&v, &u1).unwrap() + b * ctx.frechet_pair(&v, &u2).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn caches_match_fresh_evaluation() {
        let (_, ctx) = setup(0.05);
        let act = BumpActivation::new(1).unwrap();
        let u0 = BumpSum::unit(act);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let j = rng.random_range(0..ctx.rule().len());
            let x = ctx.rule().node(j);
            assert!((ctx.prev().values[j] - u0.value(x)).abs() < 1e-12);
            let mut g = [0.0];
            u0.gradient(x, &mut g);
            assert!((ctx.prev().grads.as_ref().unwrap()[j] - g[0]).abs() < 1e-12);
            assert!((ctx.f_prev()[j] - ctx.spec().apply_f(&u0, x, None).unwrap()).abs() < 1e-12);
        }
    }

    fn fd_check(ctx: &EnergyContext, act: &BumpActivation, net: &NetworkParams) -> f64 {
        let grad = ctx.loss_grad(net, act).unwrap();
        let theta = net.flat();
        let gmax = grad.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let r = net.clip_radius();
        let mut worst = 0.0f64;
        for k in 0..theta.len() {
            let (neuron, slot) = (k / (2 + net.dim()), k % (2 + net.dim()));
            let p = &net.neurons[neuron];
            let interior = match slot {
                0 => r - p.beta.abs() >= 1e-3,
                1 => r - p.alpha.abs() >= 1e-3 && p.alpha.abs() - 1.0 / r >= 1e-3,
                s => r - p.c[s - 2].abs() >= 1e-3,
            };
            if !interior {
                continue;
            }
            let e = 1e-6;
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[k] += e;
            tm[k] -= e;
            let fp = net.with_flat(&tp).unwrap().forward(act, ctx.rule());
            let fm = net.with_flat(&tm).unwrap().forward(act, ctx.rule());
            let fd = ctx.loss_difference(&fp, &fm).unwrap() / (2.0 * e);
            worst = worst.max((grad[k] - fd).abs() / grad[k].abs().max(1e-3 * gmax));
        }
        worst
    }

    #[test]
    fn two_neuron_gradient_matches_finite_differences() {
        let (act, ctx) = setup(0.05);
        let net = NetworkParams::new(
            1,
            vec![
                NeuronParams::new(0.6, 1.2, vec![0.3]).unwrap(),
                NeuronParams::new(-0.4, 0.8, vec![-0.5]).unwrap(),
            ],
            0.75,
            3.0,
        )
        .unwrap();
        let err = fd_check(&ctx, &act, &net);
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn two_dimensional_gradient_matches_finite_differences() {
        let act = BumpActivation::new(2).unwrap();
        let rule = tensor_grid(&BoxDomain::new(vec![0.2, 0.05], vec![2.5, 0.6]).unwrap(), 40).unwrap();
        let spec = OperatorSpec::heston(0.03, 0.4, -0.5, 2.0, 0.06).unwrap();
        let prev = BumpSum::new(
            act,
            vec![BumpTerm {
                amplitude: 1.0,
                center: vec![1.2, 0.3],
                width: 0.8,
            }],
        )
        .unwrap();
        let ctx = EnergyContext::new(spec, rule, 0.02, &prev, None).unwrap();
        let net = init_params(8, 2, 0.75, 2.0, 21).unwrap();
        let err = fd_check(&ctx, &act, &net);
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn zero_data_gives_zero_gradient_and_masks() {
        let act = BumpActivation::new(1).unwrap();
        let rule = tensor_grid(&BoxDomain::symmetric(1, 4.0).unwrap(), 200).unwrap();
        let ctx = EnergyContext::new(OperatorSpec::heat(1.0, 1).unwrap(), rule, 0.05, &ZeroField(1), None).unwrap();
        let mut net = init_params(16, 1, 0.75, 2.7, 3).unwrap();
        net.neurons.iter_mut().for_each(|p| p.beta = 0.0);
        assert!(ctx.loss_grad(&net, &act).unwrap().iter().all(|v| *v == 0.0));

        net.neurons[0].beta = 10.0;
        net.neurons[0].c[0] = 0.0;
        net.neurons[0].alpha = 1.0;
        let g = ctx.loss_grad(&net, &act).unwrap();
        assert_eq!(g[0], 0.0);
        assert!(g[1] != 0.0 || g[2] != 0.0);
    }

    #[test]
    fn step_bound_is_enforced() {
        let (_, ctx) = setup(0.6);
        let c = ctx.spec().analytic_constants().unwrap();
        assert!(ctx.check_step(&c).is_err());
        let (_, ctx) = setup(0.1);
        assert!(ctx.check_step(&c).is_ok());
    }
}
