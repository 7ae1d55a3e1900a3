//! Parameter gradient flow `d theta/dt = -eta_n grad I` by explicit Euler with
//! step backoff, and the backward-Euler time-stepping driver.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::activation::BumpActivation;
use crate::energy::{l2_norm, EnergyContext};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::operators::{AssumptionConstants, ConstantSource, OperatorSpec};
use crate::quadrature::QuadratureRule;
use crate::seeds::stage_seed;
use crate::shallow_net::{init_params, NetworkParams};

/// Flow-time integration settings for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub dt: f64,
    pub t_end: f64,
    pub backoff: f64,
    pub max_backoffs: usize,
    pub record_every: usize,
    /// Stop once the parameter-gradient norm drops below this value.
    pub grad_tol: Option<f64>,
    /// Factor applied to the step after an accepted step; 1 keeps it fixed.
    pub growth: f64,
    /// Upper bound for the grown step.
    pub dt_max: Option<f64>,
    /// Flow times at which parameter snapshots are kept. The integrator
    /// lands on each exactly.
    pub probe_times: Vec<f64>,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            dt: 1e-2,
            t_end: 10.0,
            backoff: 0.5,
            max_backoffs: 30,
            record_every: 10,
            grad_tol: None,
            growth: 1.0,
            dt_max: None,
            probe_times: Vec::new(),
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::config("flow.dt", "must be positive"));
        }
        if !(self.t_end > 0.0) || !self.t_end.is_finite() {
            return Err(Error::config("flow.t_end", "must be positive"));
        }
        if !(self.backoff > 0.0 && self.backoff < 1.0) {
            return Err(Error::config("flow.backoff", "must lie in (0, 1)"));
        }
        if !(self.growth >= 1.0) {
            return Err(Error::config("flow.growth", "must be at least 1"));
        }
        if self.record_every == 0 {
            return Err(Error::config("flow.record_every", "must be positive"));
        }
        if let Some(tol) = self.grad_tol {
            if !(tol > 0.0) {
                return Err(Error::config("flow.grad_tol", "must be positive"));
            }
        }
        if self.probe_times.windows(2).any(|w| !(w[0] < w[1])) || self.probe_times.iter().any(|t| !(*t >= 0.0 && *t <= self.t_end)) {
            return Err(Error::config("flow.probe_times", "must be increasing and within [0, t_end]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub t: f64,
    pub params: NetworkParams,
}

/// Loss history of a training run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingTrace {
    pub records: Vec<TraceRecord>,
    pub snapshots: Vec<Snapshot>,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    /// Accepted steps whose loss rose by more than `1e-12`.
    pub violations: usize,
    /// Largest accepted loss change, `I(new) - I(old)`.
    pub max_increase: f64,
    pub converged: bool,
    pub final_t: f64,
    pub final_loss: f64,
    pub final_grad_norm: f64,
}

/// One explicit Euler step `theta - dt eta grad I`.
pub fn flow_step(ctx: &EnergyContext, net: &NetworkParams, act: &BumpActivation, dt: f64, eta: f64) -> Result<NetworkParams> {
    let grad = ctx.loss_grad(net, act)?;
    step_with(net, &grad, dt * eta)
}

fn step_with(net: &NetworkParams, grad: &[f64], scale: f64) -> Result<NetworkParams> {
    if scale == 0.0 {
        return Ok(net.clone());
    }
    let theta: Vec<f64> = net.flat().iter().zip(grad).map(|(t, g)| t - scale * g).collect();
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("parameter update".into()));
    }
    let mut next = net.with_flat(&theta);
    // A scale parameter landing exactly on zero has no clip image.
    if next.is_err() {
        let mut fixed = theta;
        let stride = 2 + net.dim();
        for (i, ch) in fixed.chunks_exact_mut(stride).enumerate() {
            if ch[1] == 0.0 {
                ch[1] = net.neurons[i].alpha;
            }
        }
        next = net.with_flat(&fixed);
    }
    next
}

/// Integrates the flow from `init` until `t_end` (or until the gradient
/// tolerance is met with no probe times pending). Steps that would raise the
/// loss are retried with a smaller step.
pub fn train(ctx: &EnergyContext, init: NetworkParams, act: &BumpActivation, cfg: &FlowConfig) -> Result<(NetworkParams, TrainingTrace)> {
    cfg.validate()?;
    let eta = init.learning_rate();
    let mut net = init;
    let mut nf = net.forward(act, ctx.rule());
    let (mut loss, mut grad) = ctx.loss_and_grad(&net, act)?;
    let mut gnorm = l2_norm(&grad);
    let mut trace = TrainingTrace::default();
    let mut t = 0.0;
    let mut step = cfg.dt;
    let mut probes = cfg.probe_times.iter().copied().peekable();
    let mut since_record = 0;

    let take_probes = |t: f64, net: &NetworkParams, trace: &mut TrainingTrace, probes: &mut std::iter::Peekable<std::iter::Copied<std::slice::Iter<f64>>>| {
        while let Some(&p) = probes.peek() {
            if p <= t {
                trace.snapshots.push(Snapshot { t: p, params: net.clone() });
                probes.next();
            } else {
                break;
            }
        }
    };
    trace.records.push(TraceRecord {
        t,
        loss,
        grad_norm: gnorm,
        dt: 0.0,
    });
    take_probes(t, &net, &mut trace, &mut probes);

    while t < cfg.t_end {
        if let Some(tol) = cfg.grad_tol {
            if gnorm < tol && probes.peek().is_none() {
                trace.converged = true;
                break;
            }
        }
        let mut target = cfg.t_end;
        if let Some(&p) = probes.peek() {
            target = target.min(p);
        }
        let mut dt = step.min(target - t);
        let mut landed = dt == target - t;
        let mut attempts = 0;
        let (next, next_nf, change) = loop {
            let cand = step_with(&net, &grad, dt * eta)?;
            let cand_nf = cand.forward(act, ctx.rule());
            let change = ctx.loss_difference(&cand_nf, &nf)?;
            if change <= 0.0 {
                break (cand, cand_nf, change);
            }
            trace.rejected_steps += 1;
            attempts += 1;
            if attempts > cfg.max_backoffs {
                return Err(Error::Stalled(format!(
                    "no descent after {} backoffs at flow time {t:.6e}: loss {loss:.6e}, gradient norm {gnorm:.3e}, last step {dt:.3e}, loss change {change:.3e}",
                    cfg.max_backoffs
                )));
            }
            dt *= cfg.backoff;
            landed = false;
            step = dt;
        };
        if change > 1e-12 {
            trace.violations += 1;
        }
        trace.max_increase = if trace.accepted_steps == 0 { change } else { trace.max_increase.max(change) };
        trace.accepted_steps += 1;
        net = next;
        nf = next_nf;
        t = if landed { target } else { t + dt };
        let lg = ctx.loss_and_grad(&net, act)?;
        loss = lg.0;
        grad = lg.1;
        gnorm = l2_norm(&grad);
        if attempts == 0 && cfg.growth > 1.0 {
            step = (step * cfg.growth).min(cfg.dt_max.unwrap_or(f64::INFINITY));
        }
        take_probes(t, &net, &mut trace, &mut probes);
        since_record += 1;
        if since_record >= cfg.record_every {
            since_record = 0;
            trace.records.push(TraceRecord {
                t,
                loss,
                grad_norm: gnorm,
                dt,
            });
        }
    }
    if trace.records.last().is_some_and(|r| r.t < t) {
        trace.records.push(TraceRecord {
            t,
            loss,
            grad_norm: gnorm,
            dt: 0.0,
        });
    }
    if let Some(tol) = cfg.grad_tol {
        trace.converged = trace.converged || gnorm < tol;
    }
    trace.final_t = t;
    trace.final_loss = loss;
    trace.final_grad_norm = gnorm;
    Ok((net, trace))
}

/// Network hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub width: usize,
    pub delta: f64,
    /// Defaults to `log n`.
    pub clip_radius: Option<f64>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            width: 256,
            delta: 0.75,
            clip_radius: None,
        }
    }
}

impl NetworkConfig {
    pub fn radius(&self) -> f64 {
        self.clip_radius.unwrap_or_else(|| (self.width as f64).ln())
    }

    pub fn init(&self, dim: usize, seed: u64) -> Result<NetworkParams> {
        init_params(self.width, dim, self.delta, self.radius(), seed)
    }
}

/// Backward-Euler settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeStepConfig {
    pub t_final: f64,
    pub steps: usize,
    /// Start each step from the previous step's network instead of a fresh
    /// initialization.
    pub warm_start: bool,
    /// Frozen jump samples per run (jump operators only).
    pub jump_samples: usize,
    pub flow: FlowConfig,
}

impl Default for TimeStepConfig {
    fn default() -> Self {
        Self {
            t_final: 0.1,
            steps: 8,
            warm_start: false,
            jump_samples: 256,
            flow: FlowConfig::default(),
        }
    }
}

impl TimeStepConfig {
    pub fn h(&self) -> f64 {
        self.t_final / self.steps as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub k: usize,
    pub t_k: f64,
    pub final_loss: f64,
    pub grad_norm: f64,
    pub flow_time: f64,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub violations: usize,
    pub max_increase: f64,
    pub converged: bool,
    pub init_seed: u64,
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct Solution {
    /// `U^1 .. U^K`.
    pub steps: Vec<NetworkParams>,
    pub reports: Vec<StepReport>,
    pub traces: Vec<TrainingTrace>,
    pub constants: Option<AssumptionConstants>,
}

/// Gårding constants used for the step-size check: closed form when known,
/// otherwise derived from the coefficients on the rule.
pub fn step_constants(spec: &OperatorSpec, rule: &QuadratureRule) -> Result<Option<AssumptionConstants>> {
    if let Some(c) = spec.analytic_constants() {
        return Ok(Some(c));
    }
    Ok(spec.coefficient_garding(rule)?.map(|(l1, l2)| AssumptionConstants {
        m: f64::NAN,
        lambda1: l1,
        lambda2: l2,
        source: ConstantSource::Analytic,
    }))
}

/// Runs `K` backward-Euler steps, each solved by training a network on the
/// step's energy.
pub fn solve_pde(
    spec: &OperatorSpec,
    u0: &dyn Field,
    rule: &QuadratureRule,
    tcfg: &TimeStepConfig,
    ncfg: &NetworkConfig,
    act: &BumpActivation,
    seed: u64,
) -> Result<Solution> {
    if tcfg.steps == 0 || !(tcfg.t_final > 0.0) {
        return Err(Error::config("timestep", "need t_final > 0 and at least one step"));
    }
    tcfg.flow.validate()?;
    let h = tcfg.h();
    let constants = step_constants(spec, rule)?;
    if let Some(c) = &constants {
        if h >= c.max_step() {
            return Err(Error::config(
                "timestep.steps",
                format!("h = {h} violates h < 1/(2 lambda2) = {}", c.max_step()),
            ));
        }
    }
    let jumps = spec.sample_jumps(tcfg.jump_samples, stage_seed(seed, "jumps", 0))?;
    let mut out = Solution {
        steps: Vec::with_capacity(tcfg.steps),
        reports: Vec::with_capacity(tcfg.steps),
        traces: Vec::with_capacity(tcfg.steps),
        constants,
    };
    for k in 1..=tcfg.steps {
        let started = Instant::now();
        let ctx = match out.steps.last() {
            None => EnergyContext::new(spec.clone(), rule.clone(), h, u0, jumps.clone())?,
            Some(prev) => EnergyContext::new(spec.clone(), rule.clone(), h, &prev.as_field(act), jumps.clone())?,
        };
        let init_seed = stage_seed(seed, "init", k as u64);
        let init = match (tcfg.warm_start, out.steps.last()) {
            (true, Some(prev)) => prev.clone(),
            _ => ncfg.init(spec.dim(), init_seed)?,
        };
        let (net, trace) = train(&ctx, init, act, &tcfg.flow)?;
        out.reports.push(StepReport {
            k,
            t_k: k as f64 * h,
            final_loss: trace.final_loss,
            grad_norm: trace.final_grad_norm,
            flow_time: trace.final_t,
            accepted_steps: trace.accepted_steps,
            rejected_steps: trace.rejected_steps,
            violations: trace.violations,
            max_increase: trace.max_increase,
            converged: trace.converged,
            init_seed,
            wall_time: started.elapsed().as_secs_f64(),
        });
        out.steps.push(net);
        out.traces.push(trace);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{BumpSum, ZeroField};
    use crate::quadrature::{inner_product, tensor_grid, BoxDomain, InnerProduct};
    use crate::shallow_net::NeuronParams;

    fn heat_ctx(h: f64, prev: &dyn Field, m: usize) -> EnergyContext {
        let rule = tensor_grid(&BoxDomain::symmetric(1, 4.0).unwrap(), m).unwrap();
        EnergyContext::new(OperatorSpec::heat(1.0, 1).unwrap(), rule, h, prev, None).unwrap()
    }

    #[test]
    fn trivial_steps_are_identity() {
        let act = BumpActivation::new(1).unwrap();
        let ctx = heat_ctx(0.05, &BumpSum::unit(act), 200);
        let net = init_params(16, 1, 0.75, 2.7, 1).unwrap();
        assert_eq!(flow_step(&ctx, &net, &act, 0.0, 4.0).unwrap(), net);
        let zero_ctx = heat_ctx(0.05, &ZeroField(1), 200);
        let mut silent = net.clone();
        silent.neurons.iter_mut().for_each(|p| p.beta = 0.0);
        assert_eq!(flow_step(&zero_ctx, &silent, &act, 0.1, 4.0).unwrap(), silent);
    }

    #[test]
    fn single_neuron_step_matches_scalar_recurrence() {
        // Only beta moves; the loss is then a scalar quadratic in beta.
        let act = BumpActivation::new(1).unwrap();
        let h = 0.05;
        let ctx = heat_ctx(h, &ZeroField(1), 400);
        let net = NetworkParams::new(1, vec![NeuronParams::new(0.5, 1.0, vec![0.0]).unwrap()], 0.75, 2.0).unwrap();
        let rule = ctx.rule();
        let (mut m0, mut m1) = (0.0, 0.0);
        for (j, x) in rule.nodes().enumerate() {
            let w = rule.weights()[j];
            let psi = act.eval(x);
            let g = act.grad_vec(x)[0];
            m0 += w * psi * psi;
            m1 += w * g * g;
        }
        let (dt, eta) = (0.3, 1.0);
        // d/dbeta of 1/2 beta^2 (m0 + h m1), network scale 1 at n = 1
        let expect = 0.5 - dt * eta * 0.5 * (m0 + h * m1);
        let next = flow_step(&ctx, &net, &act, dt, eta).unwrap();
        assert!((next.neurons[0].beta - expect).abs() < 1e-12);
        let g = ctx.loss_grad(&net, &act).unwrap();
        assert!((next.neurons[0].alpha - (1.0 - dt * eta * g[1])).abs() < 1e-15);
    }

    #[test]
    fn accepted_losses_never_increase() {
        let act = BumpActivation::new(1).unwrap();
        let ctx = heat_ctx(0.05, &BumpSum::unit(act), 300);
        let init = init_params(64, 1, 0.75, 4.0, 3).unwrap();
        let cfg = FlowConfig {
            dt: 5.0,
            t_end: 200.0,
            record_every: 1,
            ..FlowConfig::default()
        };
        let (_, trace) = train(&ctx, init, &act, &cfg).unwrap();
        assert_eq!(trace.violations, 0);
        assert!(trace.rejected_steps > 0, "large initial step should trigger backoff");
        for w in trace.records.windows(2) {
            assert!(w[1].t > w[0].t);
            assert!(w[1].loss <= w[0].loss + 1e-12);
        }
    }

    #[test]
    fn probes_are_hit_exactly() {
        let act = BumpActivation::new(1).unwrap();
        let ctx = heat_ctx(0.05, &BumpSum::unit(act), 200);
        let init = init_params(32, 1, 0.75, 3.0, 4).unwrap();
        let probes = vec![0.0, 0.25, 1.0 / 3.0, 2.0];
        let cfg = FlowConfig {
            dt: 0.1,
            t_end: 2.0,
            probe_times: probes.clone(),
            ..FlowConfig::default()
        };
        let (net, trace) = train(&ctx, init.clone(), &act, &cfg).unwrap();
        let times: Vec<f64> = trace.snapshots.iter().map(|s| s.t).collect();
        assert_eq!(times, probes);
        assert_eq!(trace.snapshots[0].params, init);
        assert_eq!(trace.snapshots[3].params, net);
        assert_eq!(trace.final_t, 2.0);
    }

    #[test]
    fn stationary_start_stays_put() {
        let act = BumpActivation::new(1).unwrap();
        let ctx = heat_ctx(0.05, &ZeroField(1), 200);
        let mut init = init_params(16, 1, 0.75, 2.7, 5).unwrap();
        init.neurons.iter_mut().for_each(|p| p.beta = 0.0);
        let cfg = FlowConfig {
            dt: 0.1,
            t_end: 1.0,
            grad_tol: Some(1e-6),
            ..FlowConfig::default()
        };
        let (net, trace) = train(&ctx, init.clone(), &act, &cfg).unwrap();
        assert_eq!(net, init);
        assert!(trace.converged);
        assert!(trace.final_grad_norm < 1e-6);
    }

    #[test]
    fn degenerate_operator_is_a_projection_fixed_point() {
        let act = BumpActivation::new(1).unwrap();
        let rule = tensor_grid(&BoxDomain::symmetric(1, 4.0).unwrap(), 200).unwrap();
        let spec = OperatorSpec::zero(1).unwrap();
        let tcfg = TimeStepConfig {
            t_final: 0.1,
            steps: 3,
            warm_start: true,
            jump_samples: 0,
            flow: FlowConfig {
                dt: 0.05,
                t_end: 5.0,
                ..FlowConfig::default()
            },
        };
        let ncfg = NetworkConfig {
            width: 32,
            ..NetworkConfig::default()
        };
        let sol = solve_pde(&spec, &BumpSum::unit(act), &rule, &tcfg, &ncfg, &act, 1).unwrap();
        assert_eq!(sol.steps[1], sol.steps[0]);
        assert_eq!(sol.steps[2], sol.steps[1]);
    }

    #[test]
    fn step_bound_aborts_solve() {
        let act = BumpActivation::new(1).unwrap();
        let rule = tensor_grid(&BoxDomain::symmetric(1, 4.0).unwrap(), 50).unwrap();
        let tcfg = TimeStepConfig {
            t_final: 2.0,
            steps: 2,
            ..TimeStepConfig::default()
        };
        let err = solve_pde(
            &OperatorSpec::heat(1.0, 1).unwrap(),
            &BumpSum::unit(act),
            &rule,
            &tcfg,
            &NetworkConfig::default(),
            &act,
            1,
        )
        .unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn small_step_stays_close_to_initial_condition() {
        let act = BumpActivation::new(1).unwrap();
        let rule = tensor_grid(&BoxDomain::symmetric(1, 3.0).unwrap(), 240).unwrap();
        let u0 = BumpSum::new(
            act,
            vec![crate::field::BumpTerm {
                amplitude: 1.0,
                center: vec![0.0],
                width: 3.0,
            }],
        )
        .unwrap();
        let u0_nodes = u0.node_field(&rule);
        let spec = OperatorSpec::heat(1.0, 1).unwrap();
        // displacement of the exact backward-Euler step on the grid
        let mut errs = vec![];
        for h in [1e-2, 1e-3] {
            let ctx = EnergyContext::new(spec.clone(), rule.clone(), h, &u0, None).unwrap();
            let w = crate::widelimit::grid_minimizer(&ctx).unwrap();
            let diff = crate::quadrature::NodeField::values_only(w.values.iter().zip(&u0_nodes.values).map(|(a, b)| a - b).collect());
            errs.push(inner_product(&diff, &diff, &rule, InnerProduct::L2).unwrap().sqrt());
        }
        let ratio = errs[0] / errs[1];
        // first order in h; the h^2 term of the resolvent still shows at h = 1e-2
        assert!(ratio > 7.5 && ratio < 12.5, "{errs:?}");
    }

    #[test]
    fn learning_rate_law() {
        let a = NetworkConfig {
            width: 128,
            delta: 0.8,
            clip_radius: None,
        }
        .init(1, 1)
        .unwrap();
        let b = NetworkConfig {
            width: 256,
            delta: 0.8,
            clip_radius: None,
        }
        .init(1, 1)
        .unwrap();
        assert!((b.learning_rate() / a.learning_rate() - 2f64.powf(0.6)).abs() < 1e-12);
    }
}
