//! Infinite-width limit of the training flow on a tensor grid.
//!
//! Grid functions carry node values only; gradients are forward differences
//! (see [`QuadratureRule::grid_gradient`]). With `W` the quadrature weights
//! and `D` the difference operator the discrete `H~` Gram matrix is
//! `G = W + h (D^T W_A D + W_r)`, and the limit flow reads
//! `dV/dt = -Z G (V - w*)` with `Z` the Monte-Carlo feature kernel.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activation::BumpActivation;
use crate::energy::EnergyContext;
use crate::error::{Error, Result};
use crate::field::Field;
use crate::quadrature::{NodeField, QuadratureRule, RuleKind};
use crate::seeds::stage_seed;
use crate::shallow_net::{init_params, sample_neuron, NeuronParams};
use crate::training::{train, FlowConfig};

/// Values at the nodes of a tensor grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("grid function entry".into()));
        }
        Ok(Self { values })
    }

    /// Values with forward-difference gradients.
    pub fn field(&self, rule: &QuadratureRule) -> Result<NodeField> {
        rule.grid_field(self.values.clone())
    }

    pub fn as_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.values)
    }
}

fn require_grid(rule: &QuadratureRule) -> Result<usize> {
    match rule.kind() {
        RuleKind::TensorMidpoint { points_per_axis } => Ok(*points_per_axis),
        RuleKind::MonteCarlo { .. } => Err(Error::invalid("grid functions need a tensor-grid rule")),
    }
}

/// Discrete `H~` Gram matrix of the context's rule, operator and step.
pub fn gram_matrix(ctx: &EnergyContext) -> Result<DMatrix<f64>> {
    let rule = ctx.rule();
    let m = require_grid(rule)?;
    let d = rule.dim();
    let g = rule.len();
    let spacing = rule.spacing().expect("tensor rule");
    let w = rule.weights();
    let coeffs = ctx.coefficients();
    let h = ctx.h();
    let mut gram = DMatrix::zeros(g, g);
    // Row j of D for axis k has -1/dx at j and +1/dx at the upper neighbour.
    let stencil = |j: usize, axis: usize| -> [(Option<usize>, f64); 2] {
        let stride = m.pow((d - 1 - axis) as u32);
        let idx = (j / stride) % m;
        let up = if idx + 1 < m { Some(j + stride) } else { None };
        [(Some(j), -1.0 / spacing[axis]), (up, 1.0 / spacing[axis])]
    };
    for j in 0..g {
        gram[(j, j)] += w[j] * (1.0 + h * coeffs.reaction[j]);
        let a = coeffs.diffusion_at(j);
        for p in 0..d {
            for q in 0..d {
                let apq = h * w[j] * a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                for (ra, va) in stencil(j, p) {
                    let Some(ra) = ra else { continue };
                    for (cb, vb) in stencil(j, q) {
                        let Some(cb) = cb else { continue };
                        gram[(ra, cb)] += va * apq * vb;
                    }
                }
            }
        }
    }
    // exact symmetry regardless of summation order
    let sym = (&gram + gram.transpose()) * 0.5;
    Ok(sym)
}

/// Right-hand side `W U - h W F(U)` of the grid minimizer.
fn minimizer_rhs(ctx: &EnergyContext) -> DVector<f64> {
    let w = ctx.rule().weights();
    DVector::from_iterator(
        w.len(),
        (0..w.len()).map(|j| w[j] * (ctx.prev().values[j] - ctx.h() * ctx.f_prev()[j])),
    )
}

/// Minimizer of the step energy over grid functions, from the linear system
/// `G w = W U - h W F(U)`.
pub fn grid_minimizer(ctx: &EnergyContext) -> Result<GridFunction> {
    let gram = gram_matrix(ctx)?;
    let rhs = minimizer_rhs(ctx);
    let chol = Cholesky::new(gram.clone()).ok_or_else(|| {
        Error::LinearAlgebra("grid Gram matrix is not positive definite; check h < 1/(2 lambda2) and the operator".into())
    })?;
    let sol = chol.solve(&rhs);
    let resid = (&gram * &sol - &rhs).norm();
    let scale = rhs.norm().max(f64::MIN_POSITIVE);
    if resid > 1e-10 * scale {
        return Err(Error::LinearAlgebra(format!("minimizer residual {resid:.3e} relative to {scale:.3e}")));
    }
    GridFunction::new(sol.iter().copied().collect())
}

/// Monte-Carlo estimate of the feature kernel `Z(x_a, x_b)` at grid nodes.
#[derive(Debug, Clone)]
pub struct KernelEstimate {
    pub dim: usize,
    /// Row-major node coordinates.
    pub nodes: Vec<f64>,
    pub z: DMatrix<f64>,
    /// Standard error of each entry.
    pub se: DMatrix<f64>,
    pub samples: usize,
    pub seed: u64,
}

impl KernelEstimate {
    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }

    pub fn asymmetry(&self) -> f64 {
        (&self.z - self.z.transpose()).amax()
    }

    /// Smallest and largest eigenvalue.
    pub fn eigen_range(&self) -> (f64, f64) {
        let ev = self.z.clone().symmetric_eigenvalues();
        (ev.min(), ev.max())
    }
}

/// Unclipped parameter-gradient features of one neuron at `x`:
/// `(psi(z), beta x . grad psi(z), beta grad psi(z))`. Returns `false` when
/// `x` lies outside the neuron's support.
pub fn features(act: &BumpActivation, p: &NeuronParams, x: &[f64], out: &mut [f64]) -> bool {
    let d = x.len();
    let mut z = vec![0.0; d];
    let mut r2 = 0.0;
    for k in 0..d {
        z[k] = p.alpha * x[k] + p.c[k];
        r2 += z[k] * z[k];
    }
    if r2 >= 1.0 {
        return false;
    }
    let (head, grad) = out.split_at_mut(2);
    let psi = act.eval_all(&z, grad, &mut [], true);
    head[0] = psi;
    head[1] = p.beta * x.iter().zip(grad.iter()).map(|(a, b)| a * b).sum::<f64>();
    grad.iter_mut().for_each(|g| *g *= p.beta);
    psi != 0.0 || head[1] != 0.0
}

/// Averages `X(x_a) . X(x_b)` over `m` neurons from the initialization law.
pub fn empirical_kernel(rule: &QuadratureRule, m: usize, seed: u64, act: &BumpActivation) -> Result<KernelEstimate> {
    if m < 1000 {
        return Err(Error::invalid(format!("kernel estimation needs at least 10^3 samples, got {m}")));
    }
    if act.dim() != rule.dim() {
        return Err(Error::Dimension("activation and rule differ in dimension".into()));
    }
    let d = rule.dim();
    let g = rule.len();
    let stride = 2 + d;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = vec![0.0; g * g];
    let mut sum_sq = vec![0.0; g * g];
    let mut active: Vec<usize> = Vec::new();
    let mut feats: Vec<f64> = Vec::new();
    let mut buf = vec![0.0; stride];
    for _ in 0..m {
        let p = sample_neuron(d, &mut rng);
        active.clear();
        feats.clear();
        for (a, x) in rule.nodes().enumerate() {
            if features(act, &p, x, &mut buf) {
                active.push(a);
                feats.extend_from_slice(&buf);
            }
        }
        for (ia, &a) in active.iter().enumerate() {
            let fa = &feats[ia * stride..(ia + 1) * stride];
            for (ib, &b) in active.iter().enumerate().skip(ia) {
                let fb = &feats[ib * stride..(ib + 1) * stride];
                let prod: f64 = fa.iter().zip(fb).map(|(u, v)| u * v).sum();
                sum[a * g + b] += prod;
                sum_sq[a * g + b] += prod * prod;
            }
        }
    }
    let mf = m as f64;
    let mut z = DMatrix::zeros(g, g);
    let mut se = DMatrix::zeros(g, g);
    for a in 0..g {
        for b in a..g {
            let mean = sum[a * g + b] / mf;
            let var = (sum_sq[a * g + b] / mf - mean * mean).max(0.0) * mf / (mf - 1.0);
            z[(a, b)] = mean;
            z[(b, a)] = mean;
            se[(a, b)] = (var / mf).sqrt();
            se[(b, a)] = se[(a, b)];
        }
    }
    Ok(KernelEstimate {
        dim: d,
        nodes: rule.nodes_flat().to_vec(),
        z,
        se,
        samples: m,
        seed,
    })
}

/// Limit-flow operator `T = Z G` with its Gram matrix.
#[derive(Debug, Clone)]
pub struct Ttilde {
    pub t: DMatrix<f64>,
    pub gram: DMatrix<f64>,
    pub z: DMatrix<f64>,
}

impl Ttilde {
    /// `max |G T - T^T G|`.
    pub fn self_adjoint_defect(&self) -> f64 {
        let gt = &self.gram * &self.t;
        (&gt - gt.transpose()).amax()
    }

    /// `<u, v>_{H~}` of grid vectors.
    pub fn inner(&self, u: &[f64], v: &[f64]) -> f64 {
        let (u, v) = (DVector::from_column_slice(u), DVector::from_column_slice(v));
        u.dot(&(&self.gram * v))
    }

    pub fn norm(&self, u: &[f64]) -> f64 {
        self.inner(u, u).max(0.0).sqrt()
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        (&self.t * DVector::from_column_slice(v)).iter().copied().collect()
    }
}

pub fn build_ttilde(kernel: &KernelEstimate, ctx: &EnergyContext) -> Result<Ttilde> {
    if kernel.nodes.as_slice() != ctx.rule().nodes_flat() {
        return Err(Error::Dimension("kernel grid differs from the context's rule".into()));
    }
    let gram = gram_matrix(ctx)?;
    let t = &kernel.z * &gram;
    Ok(Ttilde {
        t,
        gram,
        z: kernel.z.clone(),
    })
}

/// Closed-form solution of the limit flow in the `G`-orthonormal eigenbasis
/// of `T`.
#[derive(Debug, Clone)]
pub struct SpectralFlow {
    /// Descending.
    pub gammas: Vec<f64>,
    /// Columns are the `G`-orthonormal eigenvectors.
    pub basis: DMatrix<f64>,
    pub h0: Vec<f64>,
    pub w_star: Vec<f64>,
}

impl SpectralFlow {
    /// `V_t - w*`.
    pub fn deviation(&self, t: f64) -> Vec<f64> {
        let coef = DVector::from_iterator(self.h0.len(), self.gammas.iter().zip(&self.h0).map(|(g, h)| (-g * t).exp() * h));
        (&self.basis * coef).iter().copied().collect()
    }

    /// `V_t`.
    pub fn evaluate(&self, t: f64) -> Vec<f64> {
        self.deviation(t).iter().zip(&self.w_star).map(|(a, b)| a + b).collect()
    }

    /// `|V_t - w*|_{H~}^2 = sum_i exp(-2 gamma_i t) (h0_i)^2`.
    pub fn norm_sq(&self, t: f64) -> f64 {
        self.gammas.iter().zip(&self.h0).map(|(g, h)| (-2.0 * g * t).exp() * h * h).sum()
    }

    pub fn gamma_min(&self) -> f64 {
        self.gammas.last().copied().unwrap_or(0.0)
    }

    pub fn gamma_max(&self) -> f64 {
        self.gammas.first().copied().unwrap_or(0.0)
    }
}

/// Generalized symmetric eigendecomposition of `T` through `S = L^T Z L`,
/// `G = L L^T`. Eigenvalues below zero (rounding of a PSD kernel) are set to
/// zero.
pub fn spectral_flow(tt: &Ttilde, v0: &[f64], w_star: &[f64]) -> Result<SpectralFlow> {
    let g = tt.gram.nrows();
    if v0.len() != g || w_star.len() != g {
        return Err(Error::Dimension("grid vectors do not match the operator".into()));
    }
    let chol = Cholesky::new(tt.gram.clone()).ok_or_else(|| Error::LinearAlgebra("Gram matrix is not positive definite".into()))?;
    let l = chol.l();
    let s = l.transpose() * &tt.z * &l;
    let s = (&s + s.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(s, f64::EPSILON, 0).ok_or_else(|| Error::LinearAlgebra("eigensolver did not converge".into()))?;
    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lt = l.transpose();
    let dev = DVector::from_iterator(g, v0.iter().zip(w_star).map(|(a, b)| a - b));
    let lt_dev = &lt * &dev;
    let mut basis = DMatrix::zeros(g, g);
    let mut gammas = Vec::with_capacity(g);
    let mut h0 = Vec::with_capacity(g);
    for (col, &i) in order.iter().enumerate() {
        let y = eig.eigenvectors.column(i).into_owned();
        let e = lt
            .solve_upper_triangular(&y)
            .ok_or_else(|| Error::LinearAlgebra("singular Cholesky factor".into()))?;
        basis.set_column(col, &e);
        gammas.push(eig.eigenvalues[i].max(0.0));
        h0.push(y.dot(&lt_dev));
    }
    Ok(SpectralFlow {
        gammas,
        basis,
        h0,
        w_star: w_star.to_vec(),
    })
}

/// Classical RK4 integration of `d(V - w*)/dt = -T (V - w*)`, reporting `V`
/// at each time of `t_grid`. The step starts at `0.01 / |T|_inf` and is
/// halved (up to 10 times) if the `H~` norm ever grows.
pub fn direct_flow(tt: &Ttilde, v0: &[f64], w_star: &[f64], t_grid: &[f64]) -> Result<Vec<Vec<f64>>> {
    let g = tt.t.nrows();
    if v0.len() != g || w_star.len() != g {
        return Err(Error::Dimension("grid vectors do not match the operator".into()));
    }
    if t_grid.windows(2).any(|w| w[1] < w[0]) || t_grid.first().is_some_and(|t| *t < 0.0) {
        return Err(Error::invalid("time grid must be non-negative and non-decreasing"));
    }
    let row_sum = (0..g).map(|i| tt.t.row(i).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let mut dt = if row_sum > 0.0 { 0.01 / row_sum } else { 1.0 };
    let dev0 = DVector::from_iterator(g, v0.iter().zip(w_star).map(|(a, b)| a - b));
    let gnorm = |v: &DVector<f64>| v.dot(&(&tt.gram * v));
    'retry: for _ in 0..=10 {
        let mut out = Vec::with_capacity(t_grid.len());
        let mut y = dev0.clone();
        let mut t = 0.0;
        let mut last_norm = gnorm(&y);
        for &target in t_grid {
            while t < target {
                let step = dt.min(target - t);
                let k1 = -(&tt.t * &y);
                let k2 = -(&tt.t * (&y + &k1 * (0.5 * step)));
                let k3 = -(&tt.t * (&y + &k2 * (0.5 * step)));
                let k4 = -(&tt.t * (&y + &k3 * step));
                y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (step / 6.0);
                t = if step == target - t { target } else { t + step };
                let nrm = gnorm(&y);
                if !nrm.is_finite() || nrm > last_norm * (1.0 + 1e-12) + 1e-300 {
                    dt *= 0.5;
                    continue 'retry;
                }
                last_norm = nrm;
            }
            out.push(y.iter().zip(w_star).map(|(a, b)| a + b).collect());
        }
        return Ok(out);
    }
    Err(Error::NonFinite("direct flow unstable after 10 step halvings".into()))
}

/// Setup of the finite-width versus limit comparison.
#[derive(Debug, Clone)]
pub struct WideLimitProblem<'a> {
    pub ctx: &'a EnergyContext,
    pub act: &'a BumpActivation,
    pub delta: f64,
    pub kernel_samples: usize,
    pub flow: FlowConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WideLimitRow {
    pub n: usize,
    pub t: f64,
    pub mean_error: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WideLimitTable {
    pub rows: Vec<WideLimitRow>,
    /// `(n, sup_t mean_error)`.
    pub sup_errors: Vec<(usize, f64)>,
    pub gamma_max: f64,
    pub gamma_min: f64,
    /// Accepted flow steps that raised the loss by more than `1e-12`,
    /// summed over all training runs.
    pub violations: usize,
    pub max_increase: f64,
}

/// `H1` norm of a grid vector with forward-difference gradients.
pub fn grid_h1_norm(rule: &QuadratureRule, values: &[f64]) -> Result<f64> {
    let nf = rule.grid_field(values.to_vec())?;
    crate::quadrature::norm(&nf, rule, crate::quadrature::InnerProduct::H1)
}

/// Trains `trials` networks for each width in `n_list` from the
/// initialization law and measures the grid `H1` distance to the limit flow
/// (started from `V_0 = 0`, the mean initial network) at each probe time.
pub fn compare_wide_limit(problem: &WideLimitProblem<'_>, n_list: &[usize], t_probe: &[f64], trials: usize, seed: u64) -> Result<WideLimitTable> {
    if trials < 5 {
        return Err(Error::invalid("wide-limit comparison needs at least 5 trials"));
    }
    if n_list.windows(2).any(|w| w[1] <= w[0]) || n_list.is_empty() {
        return Err(Error::invalid("widths must be strictly increasing"));
    }
    let Some(&t_last) = t_probe.last() else {
        return Err(Error::invalid("at least one probe time is required"));
    };
    let ctx = problem.ctx;
    let rule = ctx.rule();
    let w_star = grid_minimizer(ctx)?;
    let kernel = empirical_kernel(rule, problem.kernel_samples, stage_seed(seed, "kernel", 0), problem.act)?;
    let tt = build_ttilde(&kernel, ctx)?;
    let zero = vec![0.0; rule.len()];
    let limit = spectral_flow(&tt, &zero, &w_star.values)?;
    let limit_at: Vec<Vec<f64>> = t_probe.iter().map(|&t| limit.evaluate(t)).collect();

    let mut flow = problem.flow.clone();
    flow.probe_times = t_probe.to_vec();
    flow.t_end = t_last;
    flow.grad_tol = None;

    let mut rows = Vec::new();
    let mut sup_errors = Vec::new();
    let mut violations = 0;
    let mut max_increase = f64::NEG_INFINITY;
    for &n in n_list {
        let mut errs = vec![Vec::with_capacity(trials); t_probe.len()];
        for trial in 0..trials {
            let init = init_params(
                n,
                rule.dim(),
                problem.delta,
                (n as f64).ln(),
                stage_seed(seed, "wide-init", (n as u64) << 20 | trial as u64),
            )?;
            let (_, trace) = train(ctx, init, problem.act, &flow)?;
            violations += trace.violations;
            max_increase = max_increase.max(trace.max_increase);
            for (i, snap) in trace.snapshots.iter().enumerate() {
                let vals = snap.params.as_field(problem.act).node_field(rule).values;
                let diff: Vec<f64> = vals.iter().zip(&limit_at[i]).map(|(a, b)| a - b).collect();
                errs[i].push(grid_h1_norm(rule, &diff)?);
            }
        }
        let mut sup: f64 = 0.0;
        for (i, e) in errs.iter().enumerate() {
            let k = e.len() as f64;
            let mean = e.iter().sum::<f64>() / k;
            let var = e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
            rows.push(WideLimitRow {
                n,
                t: t_probe[i],
                mean_error: mean,
                std_error: (var / k).sqrt(),
            });
            sup = sup.max(mean);
        }
        sup_errors.push((n, sup));
    }
    Ok(WideLimitTable {
        rows,
        sup_errors,
        gamma_max: limit.gamma_max(),
        gamma_min: limit.gamma_min(),
        violations,
        max_increase,
    })
}
