//! Single-hidden-layer bump networks
//! `V(theta; x) = n^{-delta} sum_i beta_i psi(alpha_i x + c_i)` with clipped
//! parameters.
//!
//! Raw parameters are stored; clipping is applied at every evaluation. The
//! training flow moves the raw parameters while the network only ever sees
//! their clipped images.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::activation::BumpActivation;
use crate::error::{Error, Result};
use crate::field::Field;
use crate::quadrature::{NodeField, QuadratureRule};

/// Parameters of one hidden unit: output weight, isotropic scale, shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronParams {
    pub beta: f64,
    pub alpha: f64,
    pub c: Vec<f64>,
}

impl NeuronParams {
    pub fn new(beta: f64, alpha: f64, c: Vec<f64>) -> Result<Self> {
        if alpha == 0.0 {
            return Err(Error::invalid("neuron scale alpha must be nonzero"));
        }
        Ok(Self { beta, alpha, c })
    }
}

/// Which raw parameters lie inside the clip set (gradient indicators).
#[derive(Debug, Clone, PartialEq)]
pub struct ClipMask {
    pub beta: bool,
    pub alpha: bool,
    pub c: Vec<bool>,
}

impl ClipMask {
    pub fn of(p: &NeuronParams, r: f64) -> Self {
        let a = p.alpha.abs();
        Self {
            beta: p.beta.abs() <= r,
            alpha: a >= 1.0 / r && a <= r,
            c: p.c.iter().map(|v| v.abs() <= r).collect(),
        }
    }
}

/// Projects raw parameters onto `|beta| <= r`, `1/r <= |alpha| <= r`,
/// `|c_j| <= r`.
pub fn clip(p: &NeuronParams, r: f64) -> Result<NeuronParams> {
    if !(r > 1.0) {
        return Err(Error::invalid(format!("clip radius {r} must exceed 1")));
    }
    if p.alpha == 0.0 {
        return Err(Error::invalid("cannot clip alpha = 0: sign branch undefined"));
    }
    Ok(clip_unchecked(p, r))
}

#[inline]
fn clip_scalar(v: f64, r: f64) -> f64 {
    v.min(r).max(-r)
}

#[inline]
fn clip_alpha(a: f64, r: f64) -> f64 {
    if a > 0.0 {
        a.min(r).max(1.0 / r)
    } else {
        a.max(-r).min(-1.0 / r)
    }
}

fn clip_unchecked(p: &NeuronParams, r: f64) -> NeuronParams {
    NeuronParams {
        beta: clip_scalar(p.beta, r),
        alpha: clip_alpha(p.alpha, r),
        c: p.c.iter().map(|&v| clip_scalar(v, r)).collect(),
    }
}

/// Gradient of one (unscaled) neuron `beta psi(alpha x + c)` with respect to
/// its raw parameters, indicator-masked at the clip bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    pub d_beta: f64,
    pub d_alpha: f64,
    pub d_c: Vec<f64>,
    pub mask: ClipMask,
}

impl ParamGradient {
    /// `(d_beta, d_alpha, d_c...)`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 + self.d_c.len());
        v.push(self.d_beta);
        v.push(self.d_alpha);
        v.extend_from_slice(&self.d_c);
        v
    }
}

/// Raw network parameters with the width exponent and clip radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    dim: usize,
    pub neurons: Vec<NeuronParams>,
    delta: f64,
    clip_radius: f64,
}

impl NetworkParams {
    /// Validates `1/2 < delta < 1`, `clip_radius > 1`, nonzero scales and
    /// consistent shift dimensions. The `clip_radius <= log n` growth bound is
    /// a hypothesis of the wide-network analysis and is checked by
    /// [`init_params`] and the run configuration, not here.
    pub fn new(dim: usize, neurons: Vec<NeuronParams>, delta: f64, clip_radius: f64) -> Result<Self> {
        if neurons.is_empty() {
            return Err(Error::invalid("network needs at least one neuron"));
        }
        if !(delta > 0.5 && delta < 1.0) {
            return Err(Error::invalid(format!("delta = {delta} must lie in (1/2, 1)")));
        }
        if !(clip_radius > 1.0) || !clip_radius.is_finite() {
            return Err(Error::invalid(format!("clip radius {clip_radius} must exceed 1")));
        }
        for (i, p) in neurons.iter().enumerate() {
            if p.alpha == 0.0 {
                return Err(Error::invalid(format!("neuron {i} has alpha = 0")));
            }
            if p.c.len() != dim {
                return Err(Error::Dimension(format!("neuron {i} shift has length {}", p.c.len())));
            }
        }
        Ok(Self {
            dim,
            neurons,
            delta,
            clip_radius,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn width(&self) -> usize {
        self.neurons.len()
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn clip_radius(&self) -> f64 {
        self.clip_radius
    }

    /// `n^{-delta}`.
    pub fn scale(&self) -> f64 {
        (self.width() as f64).powf(-self.delta)
    }

    /// Learning rate `n^{2 delta - 1}` of the parameter flow.
    pub fn learning_rate(&self) -> f64 {
        learning_rate(self.width(), self.delta)
    }

    /// Number of trainable parameters, `(2 + d) n`.
    pub fn param_count(&self) -> usize {
        (2 + self.dim) * self.width()
    }

    pub fn clipped(&self, i: usize) -> NeuronParams {
        clip_unchecked(&self.neurons[i], self.clip_radius)
    }

    /// Flat parameter vector, per neuron `(beta, alpha, c_1..c_d)`.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for p in &self.neurons {
            v.push(p.beta);
            v.push(p.alpha);
            v.extend_from_slice(&p.c);
        }
        v
    }

    /// Inverse of [`flat`](Self::flat).
    pub fn with_flat(&self, theta: &[f64]) -> Result<Self> {
        if theta.len() != self.param_count() {
            return Err(Error::Dimension(format!(
                "flat vector of length {} for {} parameters",
                theta.len(),
                self.param_count()
            )));
        }
        let stride = 2 + self.dim;
        let neurons = theta
            .chunks_exact(stride)
            .map(|ch| NeuronParams {
                beta: ch[0],
                alpha: ch[1],
                c: ch[2..].to_vec(),
            })
            .collect();
        Self::new(self.dim, neurons, self.delta, self.clip_radius)
    }

    /// `V(theta; x)` using clipped parameters.
    pub fn eval(&self, act: &BumpActivation, x: &[f64]) -> f64 {
        let mut z = vec![0.0; self.dim];
        let mut total = 0.0;
        for p in &self.neurons {
            let q = clip_unchecked(p, self.clip_radius);
            affine(&q, x, &mut z);
            total += q.beta * act.eval(&z);
        }
        self.scale() * total
    }

    /// `grad_x V = n^{-delta} sum_i beta_i alpha_i (grad psi)(alpha_i x + c_i)`.
    pub fn spatial_grad(&self, act: &BumpActivation, x: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut z = vec![0.0; d];
        let mut g = vec![0.0; d];
        let mut out = vec![0.0; d];
        for p in &self.neurons {
            let q = clip_unchecked(p, self.clip_radius);
            affine(&q, x, &mut z);
            act.grad(&z, &mut g);
            for k in 0..d {
                out[k] += q.beta * q.alpha * g[k];
            }
        }
        let s = self.scale();
        out.iter_mut().for_each(|v| *v *= s);
        out
    }

    /// Unscaled gradient of neuron `i` with respect to its raw parameters at
    /// `x`. The network gradient is `n^{-delta}` times this.
    pub fn param_grad(&self, act: &BumpActivation, x: &[f64], i: usize) -> ParamGradient {
        let d = self.dim;
        let p = &self.neurons[i];
        let q = clip_unchecked(p, self.clip_radius);
        let mask = ClipMask::of(p, self.clip_radius);
        let mut z = vec![0.0; d];
        affine(&q, x, &mut z);
        let mut g = vec![0.0; d];
        let psi = act.eval_all(&z, &mut g, &mut [], true);
        let x_dot_g: f64 = x.iter().zip(&g).map(|(a, b)| a * b).sum();
        ParamGradient {
            d_beta: if mask.beta { psi } else { 0.0 },
            d_alpha: if mask.alpha { q.beta * x_dot_g } else { 0.0 },
            d_c: (0..d)
                .map(|k| if mask.c[k] { q.beta * g[k] } else { 0.0 })
                .collect(),
            mask,
        }
    }

    /// Spatial Jacobian of [`param_grad`](Self::param_grad): a row-major
    /// `(2 + d) x d` matrix whose rows are `grad_x` of `d_beta`, `d_alpha`,
    /// `d_c_1..d_c_d`.
    pub fn param_grad_spatial(&self, act: &BumpActivation, x: &[f64], i: usize) -> Vec<f64> {
        let d = self.dim;
        let p = &self.neurons[i];
        let q = clip_unchecked(p, self.clip_radius);
        let mask = ClipMask::of(p, self.clip_radius);
        let mut z = vec![0.0; d];
        affine(&q, x, &mut z);
        let mut g = vec![0.0; d];
        let mut hess = vec![0.0; d * d];
        act.eval_all(&z, &mut g, &mut hess, true);
        let mut out = vec![0.0; (2 + d) * d];
        fill_spatial_rows(&q, &mask, x, &g, &hess, &mut out);
        out
    }

    /// Values and spatial gradients of the network at every node.
    pub fn forward(&self, act: &BumpActivation, rule: &QuadratureRule) -> NodeField {
        let d = self.dim;
        let n_nodes = rule.len();
        let mut values = vec![0.0; n_nodes];
        let mut grads = vec![0.0; n_nodes * d];
        let mut z = vec![0.0; d];
        let mut g = vec![0.0; d];
        let (mut lo, mut hi) = (vec![0.0; d], vec![0.0; d]);
        for p in &self.neurons {
            let q = clip_unchecked(p, self.clip_radius);
            let ba = q.beta * q.alpha;
            support_box(&q, &mut lo, &mut hi);
            rule.for_each_node_near(&lo, &hi, |j, x| {
                if !affine_inside(&q, x, &mut z) {
                    return;
                }
                let psi = act.eval_all(&z, &mut g, &mut [], true);
                values[j] += q.beta * psi;
                for k in 0..d {
                    grads[j * d + k] += ba * g[k];
                }
            });
        }
        let s = self.scale();
        values.iter_mut().for_each(|v| *v *= s);
        grads.iter_mut().for_each(|v| *v *= s);
        NodeField::with_grads(values, grads)
    }

    /// Evaluable view of the network.
    pub fn as_field<'a>(&'a self, act: &'a BumpActivation) -> NetField<'a> {
        NetField { net: self, act }
    }
}

/// Rows of the spatial Jacobian of the masked neuron gradient.
pub(crate) fn fill_spatial_rows(q: &NeuronParams, mask: &ClipMask, x: &[f64], g: &[f64], hess: &[f64], out: &mut [f64]) {
    let d = x.len();
    for k in 0..d {
        out[k] = if mask.beta { q.alpha * g[k] } else { 0.0 };
    }
    for k in 0..d {
        out[d + k] = if mask.alpha {
            let hx: f64 = (0..d).map(|l| hess[l * d + k] * x[l]).sum();
            q.beta * (g[k] + q.alpha * hx)
        } else {
            0.0
        };
    }
    for r in 0..d {
        for k in 0..d {
            out[(2 + r) * d + k] = if mask.c[r] { q.beta * q.alpha * hess[r * d + k] } else { 0.0 };
        }
    }
}

/// Bounding box of the support of `psi(alpha x + c)`.
pub(crate) fn support_box(q: &NeuronParams, lo: &mut [f64], hi: &mut [f64]) {
    let r = 1.0 / q.alpha.abs();
    for k in 0..q.c.len() {
        let center = -q.c[k] / q.alpha;
        lo[k] = center - r;
        hi[k] = center + r;
    }
}

#[inline]
pub(crate) fn affine(q: &NeuronParams, x: &[f64], z: &mut [f64]) {
    for k in 0..x.len() {
        z[k] = q.alpha * x[k] + q.c[k];
    }
}

/// Writes `alpha x + c` into `z` and reports whether it lies in the open
/// unit ball.
#[inline]
pub(crate) fn affine_inside(q: &NeuronParams, x: &[f64], z: &mut [f64]) -> bool {
    let mut r2 = 0.0;
    for k in 0..x.len() {
        let v = q.alpha * x[k] + q.c[k];
        z[k] = v;
        r2 += v * v;
    }
    r2 < 1.0
}

/// [`Field`] view of a network with its activation.
#[derive(Clone, Copy)]
pub struct NetField<'a> {
    net: &'a NetworkParams,
    act: &'a BumpActivation,
}

impl Field for NetField<'_> {
    fn dim(&self) -> usize {
        self.net.dim
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.net.eval(self.act, x)
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.net.spatial_grad(self.act, x));
    }

    fn node_field(&self, rule: &QuadratureRule) -> NodeField {
        self.net.forward(self.act, rule)
    }
}

/// `n^{2 delta - 1}`.
pub fn learning_rate(n: usize, delta: f64) -> f64 {
    (n as f64).powf(2.0 * delta - 1.0)
}

/// Draws one neuron from the initialization law: `beta ~ U(-1, 1)`,
/// `alpha = S sqrt(G)` with a random sign `S` and `G ~ Gamma((d+4)/2, 1)`,
/// `c ~ N(0, I_d)`.
pub fn sample_neuron<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> NeuronParams {
    let shape = (dim as f64 + 4.0) / 2.0;
    let gamma_law = Gamma::new(shape, 1.0).expect("positive shape");
    let beta = rng.random_range(-1.0..1.0);
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let mut g: f64 = gamma_law.sample(rng);
    // G = 0 has probability zero but would violate alpha != 0.
    while g <= 0.0 {
        g = gamma_law.sample(rng);
    }
    let c = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    NeuronParams {
        beta,
        alpha: sign * g.sqrt(),
        c,
    }
}

/// i.i.d. initialization of an `n`-neuron network, deterministic in `seed`.
pub fn init_params(n: usize, dim: usize, delta: f64, clip_radius: f64, seed: u64) -> Result<NetworkParams> {
    if n == 0 {
        return Err(Error::invalid("network width must be positive"));
    }
    if clip_radius > (n as f64).ln() {
        return Err(Error::invalid(format!(
            "clip radius {clip_radius} exceeds log n = {} (growth bound r_n <= log n)",
            (n as f64).ln()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let neurons = (0..n).map(|_| sample_neuron(dim, &mut rng)).collect();
    NetworkParams::new(dim, neurons, delta, clip_radius)
}

/// Empirical moments of an initialization sample against the conditions the
/// wide-network analysis imposes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentReport {
    pub samples: usize,
    pub beta_second: f64,
    pub alpha_high: f64,
    pub alpha_inverse: f64,
    pub c_high: f64,
    /// `|mean(beta)| / std(beta)`.
    pub symmetry_stat: f64,
    pub symmetry_flag: bool,
    /// Estimated tail indices of the four moment integrands.
    pub tail_index: [f64; 4],
    /// Set when some moment integrand has an infinite mean.
    pub divergence_flag: bool,
    /// Set when an estimate exceeds ten times the value of the default law.
    pub excess_flag: bool,
}

impl MomentReport {
    pub fn all_finite(&self) -> bool {
        [self.beta_second, self.alpha_high, self.alpha_inverse, self.c_high]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn passes(&self) -> bool {
        self.all_finite() && !self.symmetry_flag && !self.divergence_flag && !self.excess_flag
    }
}

/// Closed-form moments of the default initialization law:
/// `(E|beta|^2, E|alpha|^{d+7}, E|alpha|^{-d-2}, E|c|^{d+7})`.
pub fn default_law_moments(dim: usize) -> [f64; 4] {
    let d = dim as f64;
    let k = (d + 4.0) / 2.0;
    let p = d + 7.0;
    [
        1.0 / 3.0,
        gamma(k + p / 2.0) / gamma(k),
        gamma(k - (d + 2.0) / 2.0) / gamma(k),
        2f64.powf(p / 2.0) * gamma((d + p) / 2.0) / gamma(d / 2.0),
    ]
}

fn moment_terms(s: &NeuronParams, dim: usize) -> [f64; 4] {
    let d = dim as f64;
    let a = s.alpha.abs();
    let cn = s.c.iter().map(|v| v * v).sum::<f64>().sqrt();
    [s.beta * s.beta, a.powf(d + 7.0), a.powf(-d - 2.0), cn.powf(d + 7.0)]
}

/// Hill estimate of the tail index from the top `sqrt(n)` order statistics.
/// An index at or below 1 means the population mean is infinite.
fn hill_tail_index(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| b.total_cmp(a));
    let k = (values.len() as f64).sqrt() as usize;
    let threshold = values[k];
    if !(threshold > 0.0) {
        return f64::INFINITY;
    }
    let mean_log = values[..k].iter().map(|v| (v / threshold).ln()).sum::<f64>() / k as f64;
    if mean_log > 0.0 {
        1.0 / mean_log
    } else {
        f64::INFINITY
    }
}

/// Checks a sample of initial neurons against the moment, symmetry and
/// support conditions of the initialization assumption.
pub fn validate_init(samples: &[NeuronParams], dim: usize) -> Result<MomentReport> {
    if samples.len() < 10_000 {
        return Err(Error::invalid(format!(
            "moment validation needs at least 10^4 samples, got {}",
            samples.len()
        )));
    }
    let n = samples.len();
    let mut columns: [Vec<f64>; 4] = std::array::from_fn(|_| Vec::with_capacity(n));
    for s in samples {
        for (col, v) in columns.iter_mut().zip(moment_terms(s, dim)) {
            col.push(v);
        }
    }
    let full: [f64; 4] = std::array::from_fn(|k| columns[k].iter().sum::<f64>() / n as f64);
    let tail_index: [f64; 4] = std::array::from_fn(|k| hill_tail_index(&mut columns[k]));
    let divergence_flag = (0..4).any(|k| !full[k].is_finite() || tail_index[k] <= 1.0);
    let reference = default_law_moments(dim);
    let excess_flag = (0..4).any(|k| full[k] > 10.0 * reference[k]);

    let mean = samples.iter().map(|s| s.beta).sum::<f64>() / n as f64;
    let var = samples.iter().map(|s| (s.beta - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    let std = var.sqrt();
    let symmetry_stat = if std > 0.0 { mean.abs() / std } else { f64::INFINITY };
    Ok(MomentReport {
        samples: n,
        beta_second: full[0],
        alpha_high: full[1],
        alpha_inverse: full[2],
        c_high: full[3],
        symmetry_stat,
        symmetry_flag: symmetry_stat > 4.0 / (n as f64).sqrt(),
        tail_index,
        divergence_flag,
        excess_flag,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, prop_assume, proptest};

    fn act1() -> BumpActivation {
        BumpActivation::new(1).unwrap()
    }

    #[test]
    fn clip_examples() {
        let p = NeuronParams::new(5.0, 0.1, vec![3.0]).unwrap();
        assert_eq!(clip(&p, 2.0).unwrap(), NeuronParams::new(2.0, 0.5, vec![2.0]).unwrap());
        let p = NeuronParams::new(1.0, -3.0, vec![-5.0]).unwrap();
        assert_eq!(clip(&p, 4.0).unwrap(), NeuronParams::new(1.0, -3.0, vec![-4.0]).unwrap());
        let p = NeuronParams::new(0.3, -0.7, vec![0.2]).unwrap();
        assert_eq!(clip(&p, 3.0).unwrap(), p);
        let bad = NeuronParams {
            beta: 0.0,
            alpha: 0.0,
            c: vec![0.0],
        };
        assert!(clip(&bad, 2.0).is_err());
        assert!(clip(&p, 1.0).is_err());
    }

    #[test]
    fn eval_examples() {
        let act = act1();
        let w0 = act.eval(&[0.0]);
        let one = NetworkParams::new(1, vec![NeuronParams::new(1.0, 1.0, vec![0.0]).unwrap()], 0.75, 2.0).unwrap();
        assert!((one.eval(&act, &[0.0]) - w0).abs() < 1e-15);
        let four = NetworkParams::new(
            1,
            vec![NeuronParams::new(1.0, 1.0, vec![0.0]).unwrap(); 4],
            0.5 + 1e-12,
            2.0,
        )
        .unwrap();
        // 4 * 4^{-1/2} w(0) = 2 w(0)
        assert!((four.eval(&act, &[0.0]) - 2.0 * w0).abs() < 1e-10);
        let mut zero = init_params(64, 1, 0.75, 4.0, 3).unwrap();
        zero.neurons.iter_mut().for_each(|p| p.beta = 0.0);
        assert_eq!(zero.eval(&act, &[0.3]), 0.0);
        assert_eq!(zero.spatial_grad(&act, &[0.3]), vec![0.0]);
    }

    #[test]
    fn vanishes_outside_supports() {
        let act = act1();
        let net = init_params(64, 1, 0.75, 4.0, 5).unwrap();
        // every support lies in |x| <= r(1+r)
        let far = [4.0 * 5.0 + 0.5];
        assert_eq!(net.eval(&act, &far), 0.0);
        assert_eq!(net.spatial_grad(&act, &far), vec![0.0]);
    }

    #[test]
    fn spatial_grad_matches_finite_differences() {
        let act = act1();
        let net = NetworkParams::new(1, vec![NeuronParams::new(0.7, 1.3, vec![-0.1]).unwrap()], 0.75, 3.0).unwrap();
        let x = 0.2;
        let e = 1e-6;
        let fd = (net.eval(&act, &[x + e]) - net.eval(&act, &[x - e])) / (2.0 * e);
        let g = net.spatial_grad(&act, &[x])[0];
        assert!((g - fd).abs() <= 1e-6 * g.abs());
    }

    fn neuron_value(act: &BumpActivation, p: &NeuronParams, x: &[f64]) -> f64 {
        let z: Vec<f64> = x.iter().zip(&p.c).map(|(xi, ci)| p.alpha * xi + ci).collect();
        p.beta * act.eval(&z)
    }

    #[test]
    fn param_grad_matches_finite_differences() {
        let act = act1();
        let p = NeuronParams::new(0.8, 1.1, vec![0.25]).unwrap();
        let net = NetworkParams::new(1, vec![p.clone()], 0.75, 3.0).unwrap();
        let x = [0.3];
        let g = net.param_grad(&act, &x, 0).to_vec();
        let e = 1e-6;
        for k in 0..3 {
            let mut plus = p.clone();
            let mut minus = p.clone();
            match k {
                0 => {
                    plus.beta += e;
                    minus.beta -= e
                }
                1 => {
                    plus.alpha += e;
                    minus.alpha -= e
                }
                _ => {
                    plus.c[0] += e;
                    minus.c[0] -= e
                }
            }
            let fd = (neuron_value(&act, &plus, &x) - neuron_value(&act, &minus, &x)) / (2.0 * e);
            assert!((g[k] - fd).abs() <= 1e-6 * g[k].abs().max(1e-3), "param {k}: {} vs {fd}", g[k]);
        }
    }

    #[test]
    fn param_grad_masks_and_zero_beta() {
        let act = act1();
        let net = NetworkParams::new(
            1,
            vec![
                NeuronParams::new(5.0, 1.0, vec![0.0]).unwrap(),
                NeuronParams::new(0.0, 1.0, vec![0.1]).unwrap(),
            ],
            0.75,
            2.0,
        )
        .unwrap();
        let g0 = net.param_grad(&act, &[0.2], 0);
        assert_eq!(g0.d_beta, 0.0);
        assert!(!g0.mask.beta);
        let g1 = net.param_grad(&act, &[0.2], 1);
        assert_eq!(g1.d_alpha, 0.0);
        assert_eq!(g1.d_c, vec![0.0]);
        assert!((g1.d_beta - act.eval(&[0.3])).abs() < 1e-15);
        let rows = net.param_grad_spatial(&act, &[0.2], 0);
        assert_eq!(rows[0], 0.0);
    }

    #[test]
    fn param_grad_spatial_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for dim in 1..=2 {
            let act = BumpActivation::new(dim).unwrap();
            let mut done = 0;
            while done < 20 {
                let p = NeuronParams::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(0.5..2.0),
                    (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect(),
                )
                .unwrap();
                let net = NetworkParams::new(dim, vec![p.clone()], 0.75, 3.0).unwrap();
                let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                let z: Vec<f64> = x.iter().zip(&p.c).map(|(a, c)| p.alpha * a + c).collect();
                if z.iter().map(|v| v * v).sum::<f64>().sqrt() > 0.95 {
                    continue;
                }
                done += 1;
                let jac = net.param_grad_spatial(&act, &x, 0);
                let e = 1e-6;
                let scale = jac.iter().fold(1e-3f64, |a, v| a.max(v.abs()));
                for k in 0..dim {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[k] += e;
                    xm[k] -= e;
                    let gp = net.param_grad(&act, &xp, 0).to_vec();
                    let gm = net.param_grad(&act, &xm, 0).to_vec();
                    for row in 0..2 + dim {
                        let fd = (gp[row] - gm[row]) / (2.0 * e);
                        assert!((jac[row * dim + k] - fd).abs() <= 1e-5 * scale, "row {row} axis {k}");
                    }
                }
            }
        }
    }

    #[test]
    fn init_is_deterministic_and_validated() {
        let a = init_params(100, 2, 0.75, 4.0, 17).unwrap();
        assert_eq!(a, init_params(100, 2, 0.75, 4.0, 17).unwrap());
        assert!(init_params(100, 1, 0.75, 5.0, 1).is_err());
        assert!(init_params(100, 1, 0.4, 4.0, 1).is_err());
    }

    #[test]
    fn beta_mean_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| sample_neuron(1, &mut rng).beta).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01);
    }

    #[test]
    fn inverse_alpha_moment_matches_gamma_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 1_000_000;
        let vals: Vec<f64> = (0..n).map(|_| sample_neuron(1, &mut rng).alpha.abs().powi(-3)).collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let se = (var / n as f64).sqrt();
        // E[G^{-3/2}] = Gamma(1) / Gamma(5/2) for G ~ Gamma(5/2, 1)
        let exact = 1.0 / gamma(2.5);
        assert!((mean - exact).abs() < 3.0 * se, "{mean} vs {exact} (se {se})");
    }

    #[test]
    fn validate_init_flags_violations() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let good: Vec<NeuronParams> = (0..100_000).map(|_| sample_neuron(1, &mut rng)).collect();
        let report = validate_init(&good, 1).unwrap();
        assert!(report.all_finite());
        assert!(report.symmetry_stat < 0.02);
        assert!(report.passes(), "{report:?}");

        let skewed: Vec<NeuronParams> = good.iter().map(|p| NeuronParams { beta: 1.0, ..p.clone() }).collect();
        assert!(validate_init(&skewed, 1).unwrap().symmetry_flag);

        let uniform_alpha: Vec<NeuronParams> = good
            .iter()
            .map(|p| {
                let mut a: f64 = rng.random_range(-1.0..1.0);
                while a == 0.0 {
                    a = rng.random_range(-1.0..1.0);
                }
                NeuronParams { alpha: a, ..p.clone() }
            })
            .collect();
        assert!(validate_init(&uniform_alpha, 1).unwrap().divergence_flag);
        assert!(validate_init(&good[..100], 1).is_err());
    }

    #[test]
    fn flat_round_trip_and_learning_rate() {
        let net = init_params(20, 2, 0.75, 2.5, 1).unwrap();
        assert_eq!(net.with_flat(&net.flat()).unwrap(), net);
        assert_eq!(net.param_count(), 80);
        let ratio = learning_rate(200, 0.7) / learning_rate(100, 0.7);
        assert!((ratio - 2f64.powf(0.4)).abs() < 1e-12);
        assert!((learning_rate(100, 0.75) - 10.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn clip_is_idempotent_and_feasible(
            beta in -50.0f64..50.0, alpha in -50.0f64..50.0, c in -50.0f64..50.0, r in 1.01f64..10.0,
        ) {
            prop_assume!(alpha != 0.0);
            let p = NeuronParams::new(beta, alpha, vec![c]).unwrap();
            let q = clip(&p, r).unwrap();
            prop_assert_eq!(clip(&q, r).unwrap(), q.clone());
            prop_assert!(q.beta.abs() <= r && q.c[0].abs() <= r);
            prop_assert!(q.alpha.abs() >= 1.0 / r - 1e-15 && q.alpha.abs() <= r);
            prop_assert_eq!(q.alpha.signum(), alpha.signum());
            if beta.abs() <= r && alpha.abs() <= r && alpha.abs() >= 1.0 / r && c.abs() <= r {
                prop_assert_eq!(q, p);
            }
        }

        #[test]
        fn forward_matches_pointwise_eval(seed in 0u64..1000) {
            let act = BumpActivation::new(1).unwrap();
            let net = init_params(16, 1, 0.75, 2.7, seed).unwrap();
            let rule = crate::quadrature::tensor_grid(&crate::quadrature::BoxDomain::symmetric(1, 4.0).unwrap(), 33).unwrap();
            let nf = net.forward(&act, &rule);
            for (j, x) in rule.nodes().enumerate() {
                prop_assert!((nf.values[j] - net.eval(&act, x)).abs() < 1e-14);
                prop_assert!((nf.grads.as_ref().unwrap()[j] - net.spatial_grad(&act, x)[0]).abs() < 1e-13);
            }
        }
    }
}
