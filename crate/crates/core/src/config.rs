//! Run configuration: a TOML document (or a previously written manifest)
//! resolved into validated solver objects.
//!
//! ```toml
//! seed = 7
//! problem = "heat"
//!
//! [network]
//! width = 512
//!
//! [timestep]
//! steps = 16
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::{self, MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::activation::BumpActivation;
use crate::error::{Error, Result};
use crate::field::{BumpSum, BumpTerm};
use crate::operators::{AssumptionConstants, JumpLaw, OperatorSpec};
use crate::quadrature::{monte_carlo, tensor_grid, BoxDomain, QuadratureRule};
use crate::seeds::stage_seed;
use crate::shallow_net::learning_rate;
use crate::training::{step_constants, FlowConfig, NetworkConfig, TimeStepConfig};

const OPERATORS: [&str; 6] = ["heat", "black_scholes", "heston", "merton", "allen_cahn", "zero"];

/// Operator, initial condition and computational box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub operator: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa_v: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jump_lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jump_mean: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jump_std: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub u0: Option<Vec<BumpTerm>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lower: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub upper: Option<Vec<f64>>,
}

/// Accepts either `problem = "heat"` or a `[problem]` table.
fn problem_from_either<'de, D: Deserializer<'de>>(de: D) -> std::result::Result<ProblemConfig, D::Error> {
    struct Either;
    impl<'de> Visitor<'de> for Either {
        type Value = ProblemConfig;

        fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
            f.write_str("an operator name or a problem table")
        }

        fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<ProblemConfig, E> {
            Ok(ProblemConfig {
                operator: v.to_string(),
                ..Default::default()
            })
        }

        fn visit_map<M: MapAccess<'de>>(self, map: M) -> std::result::Result<ProblemConfig, M::Error> {
            ProblemConfig::deserialize(de::value::MapAccessDeserializer::new(map))
        }
    }
    de.deserialize_any(Either)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadratureKind {
    Grid,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadratureConfig {
    pub kind: QuadratureKind,
    /// Points per axis for grids, total samples for Monte Carlo. Defaults to
    /// 200 in one dimension and 48 per axis otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub points: Option<usize>,
    /// Monte Carlo node seed; derived from the master seed when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self {
            kind: QuadratureKind::Grid,
            points: None,
            seed: None,
        }
    }
}

/// Backward-Euler settings without the nested flow table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeStepSection {
    pub t_final: f64,
    pub steps: usize,
    pub warm_start: bool,
    pub jump_samples: usize,
}

impl Default for TimeStepSection {
    fn default() -> Self {
        let t = TimeStepConfig::default();
        Self {
            t_final: t.t_final,
            steps: t.steps,
            warm_start: t.warm_start,
            jump_samples: t.jump_samples,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    /// Time-step refinement over `k_list`.
    K,
    /// Width sweep over `n_list` against the wide limit.
    N,
}

/// Subcommand-specific settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub sweep: SweepKind,
    pub k_list: Vec<usize>,
    pub n_list: Vec<usize>,
    pub t_probe: Vec<f64>,
    pub trials: usize,
    pub kernel_samples: usize,
    /// Random networks used by `check-assumptions`.
    pub trial_networks: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            sweep: SweepKind::K,
            k_list: vec![4, 8, 16],
            n_list: vec![64, 256, 1024],
            t_probe: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            trials: 5,
            kernel_samples: 100_000,
            trial_networks: 100,
        }
    }
}

/// Complete run description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(deserialize_with = "problem_from_either")]
    pub problem: ProblemConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub quadrature: QuadratureConfig,
    #[serde(default)]
    pub flow: FlowConfig,
    #[serde(default)]
    pub timestep: TimeStepSection,
    #[serde(default)]
    pub experiment: ExperimentConfig,
}

/// Solver objects built from a [`RunConfig`].
#[derive(Debug, Clone)]
pub struct Resolved {
    pub spec: OperatorSpec,
    pub u0: BumpSum,
    pub domain: BoxDomain,
    pub rule: QuadratureRule,
    pub act: BumpActivation,
    pub network: NetworkConfig,
    pub timestep: TimeStepConfig,
    pub constants: Option<AssumptionConstants>,
}

impl Resolved {
    pub fn h(&self) -> f64 {
        self.timestep.h()
    }

    pub fn learning_rate(&self) -> f64 {
        learning_rate(self.network.width, self.network.delta)
    }
}

fn bad(field: &str, message: impl Into<String>) -> Error {
    Error::config(field, message)
}

/// Reads a TOML config, or the `config` entry of a JSON run manifest, and
/// validates it. Every error is a configuration error.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| bad("config", format!("cannot read {}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    let mut cfg = if is_json { from_manifest_text(&text)? } else { from_toml_str(&text)? };
    cfg.fill_defaults()?;
    cfg.resolve()?;
    Ok(cfg)
}

/// Parses a TOML document without validation.
pub fn from_toml_str(text: &str) -> Result<RunConfig> {
    toml::from_str(text).map_err(|e| bad("config", e.message().to_string() + &span_hint(&e, text)))
}

fn span_hint(e: &toml::de::Error, text: &str) -> String {
    match e.span() {
        Some(span) => {
            let line = text[..span.start.min(text.len())].lines().count().max(1);
            format!(" (line {line})")
        }
        None => String::new(),
    }
}

fn from_manifest_text(text: &str) -> Result<RunConfig> {
    #[derive(Deserialize)]
    struct Wrapper {
        config: RunConfig,
    }
    serde_json::from_str::<Wrapper>(text)
        .map(|w| w.config)
        .map_err(|e| bad("manifest", e.to_string()))
}

/// Names of the parameters each operator accepts.
fn allowed_keys(op: &str) -> &'static [&'static str] {
    match op {
        "heat" => &["dim", "kappa"],
        "black_scholes" => &["dim", "sigma", "r"],
        "heston" => &["dim", "r", "eta", "rho", "kappa_v", "theta"],
        "merton" => &["dim", "sigma", "r", "b", "jump_lambda", "jump_mean", "jump_std"],
        "allen_cahn" => &["dim", "epsilon"],
        _ => &["dim"],
    }
}

impl ProblemConfig {
    fn present_keys(&self) -> Vec<&'static str> {
        let mut keys = Vec::new();
        let mut mark = |name: &'static str, set: bool| {
            if set {
                keys.push(name);
            }
        };
        mark("dim", self.dim.is_some());
        mark("kappa", self.kappa.is_some());
        mark("sigma", self.sigma.is_some());
        mark("r", self.r.is_some());
        mark("eta", self.eta.is_some());
        mark("rho", self.rho.is_some());
        mark("kappa_v", self.kappa_v.is_some());
        mark("theta", self.theta.is_some());
        mark("epsilon", self.epsilon.is_some());
        mark("b", self.b.is_some());
        mark("jump_lambda", self.jump_lambda.is_some());
        mark("jump_mean", self.jump_mean.is_some());
        mark("jump_std", self.jump_std.is_some());
        keys
    }

    fn fill_defaults(&mut self) -> Result<()> {
        let op = self.operator.as_str();
        if !OPERATORS.contains(&op) {
            return Err(bad("problem.operator", format!("unknown operator `{op}`; expected one of {}", OPERATORS.join(", "))));
        }
        let allowed = allowed_keys(op);
        if let Some(key) = self.present_keys().into_iter().find(|k| !allowed.contains(k)) {
            return Err(bad(&format!("problem.{key}"), format!("not a parameter of the {op} operator")));
        }
        let fixed_dim = match op {
            "black_scholes" => Some(1),
            "heston" => Some(2),
            "merton" => self.b.as_ref().map(Vec::len),
            _ => None,
        };
        if let (Some(fixed), Some(given)) = (fixed_dim, self.dim) {
            if fixed != given {
                return Err(bad("problem.dim", format!("the {op} operator here has dimension {fixed}, got {given}")));
            }
        }
        let dim = self.dim.or(fixed_dim).unwrap_or(1);
        if dim == 0 || dim > 4 {
            return Err(bad("problem.dim", "must lie in 1..=4"));
        }
        self.dim = Some(dim);
        match op {
            "heat" => {
                self.kappa.get_or_insert(1.0);
            }
            "black_scholes" => {
                self.sigma.get_or_insert(0.4);
                self.r.get_or_insert(0.05);
            }
            "heston" => {
                self.r.get_or_insert(0.05);
                self.eta.get_or_insert(0.3);
                self.rho.get_or_insert(-0.5);
                self.kappa_v.get_or_insert(2.0);
                self.theta.get_or_insert(0.04);
            }
            "merton" => {
                let sigma = *self.sigma.get_or_insert(0.4);
                let r = *self.r.get_or_insert(0.05);
                self.b.get_or_insert_with(|| vec![0.5 * sigma * sigma - r; dim]);
                self.jump_lambda.get_or_insert(0.5);
                self.jump_mean.get_or_insert_with(|| vec![0.0; dim]);
                self.jump_std.get_or_insert(0.3);
            }
            "allen_cahn" => {
                self.epsilon.get_or_insert(1.0);
            }
            _ => {}
        }
        let (lower, upper) = match op {
            "heston" => (vec![0.0, 0.0], vec![2.0, 1.0]),
            _ => (vec![-3.0; dim], vec![3.0; dim]),
        };
        self.lower.get_or_insert(lower);
        self.upper.get_or_insert(upper);
        if self.u0.is_none() {
            let (center, width) = match op {
                "heston" => (vec![1.0, 0.5], 0.4),
                _ => (vec![0.0; dim], 1.0),
            };
            self.u0 = Some(vec![BumpTerm {
                amplitude: 1.0,
                center,
                width,
            }]);
        }
        Ok(())
    }

    /// Operator built from filled parameters.
    pub fn operator_spec(&self) -> Result<OperatorSpec> {
        let dim = self.dim.unwrap_or(1);
        let get = |v: Option<f64>, name: &str| v.ok_or_else(|| bad(&format!("problem.{name}"), "missing"));
        let field = |e: Error, name: &str| match e {
            Error::InvalidParameter(m) | Error::Dimension(m) => bad(&format!("problem.{name}"), m),
            other => other,
        };
        let spec = match self.operator.as_str() {
            "heat" => OperatorSpec::heat(get(self.kappa, "kappa")?, dim).map_err(|e| field(e, "kappa"))?,
            "black_scholes" => OperatorSpec::black_scholes(get(self.sigma, "sigma")?, get(self.r, "r")?).map_err(|e| field(e, "sigma"))?,
            "heston" => OperatorSpec::heston(
                get(self.r, "r")?,
                get(self.eta, "eta")?,
                get(self.rho, "rho")?,
                get(self.kappa_v, "kappa_v")?,
                get(self.theta, "theta")?,
            )
            .map_err(|e| field(e, "heston"))?,
            "merton" => OperatorSpec::merton(
                get(self.sigma, "sigma")?,
                get(self.r, "r")?,
                self.b.clone().unwrap_or_default(),
                JumpLaw {
                    lambda: get(self.jump_lambda, "jump_lambda")?,
                    mean: self.jump_mean.clone().unwrap_or_default(),
                    std: get(self.jump_std, "jump_std")?,
                },
            )
            .map_err(|e| field(e, "merton"))?,
            "allen_cahn" => OperatorSpec::allen_cahn(get(self.epsilon, "epsilon")?, dim).map_err(|e| field(e, "epsilon"))?,
            _ => OperatorSpec::zero(dim)?,
        };
        Ok(spec)
    }
}

impl RunConfig {
    /// Minimal configuration for the named operator.
    pub fn for_operator(name: &str) -> Self {
        Self {
            seed: 0,
            out: None,
            problem: ProblemConfig {
                operator: name.to_string(),
                ..Default::default()
            },
            network: NetworkConfig::default(),
            quadrature: QuadratureConfig::default(),
            flow: FlowConfig::default(),
            timestep: TimeStepSection::default(),
            experiment: ExperimentConfig::default(),
        }
    }

    /// Writes every defaulted value back into the config so that it is
    /// self-describing.
    pub fn fill_defaults(&mut self) -> Result<()> {
        self.problem.fill_defaults()?;
        let dim = self.problem.dim.unwrap_or(1);
        self.quadrature.points.get_or_insert(if dim == 1 { 200 } else { 48 });
        if self.network.clip_radius.is_none() {
            self.network.clip_radius = Some((self.network.width as f64).ln());
        }
        Ok(())
    }

    /// Validates the config and builds the solver objects.
    pub fn resolve(&self) -> Result<Resolved> {
        let mut cfg = self.clone();
        cfg.fill_defaults()?;
        let p = &cfg.problem;
        let spec = p.operator_spec()?;
        let dim = spec.dim();

        let n = cfg.network.width;
        if n == 0 {
            return Err(bad("network.width", "must be positive"));
        }
        let delta = cfg.network.delta;
        if !(delta > 0.5 && delta < 1.0) {
            return Err(bad("network.delta", format!("delta = {delta} violates 1/2 < delta < 1")));
        }
        let radius = cfg.network.radius();
        let log_n = (n as f64).ln();
        if !(radius > 1.0) {
            return Err(bad("network.clip_radius", format!("r_n = {radius} must exceed 1")));
        }
        if radius > log_n * (1.0 + 1e-12) {
            return Err(bad("network.clip_radius", format!("r_n = {radius} violates r_n <= log n = {log_n}")));
        }

        let lower = p.lower.clone().unwrap_or_default();
        let upper = p.upper.clone().unwrap_or_default();
        if lower.len() != dim || upper.len() != dim {
            return Err(bad("problem.lower", format!("box bounds need {dim} entries")));
        }
        let domain = BoxDomain::new(lower, upper).map_err(|e| bad("problem.upper", e.to_string()))?;
        let act = BumpActivation::new(dim)?;
        let terms = p.u0.clone().unwrap_or_default();
        if terms.is_empty() {
            return Err(bad("problem.u0", "at least one bump term is required"));
        }
        let u0 = BumpSum::new(act, terms).map_err(|e| bad("problem.u0", e.to_string()))?;
        let (slo, shi) = u0.support();
        if (0..dim).any(|k| slo[k] < domain.lower()[k] || shi[k] > domain.upper()[k]) {
            return Err(bad("problem.u0", "initial condition support leaves the box"));
        }

        let points = cfg.quadrature.points.unwrap_or(200);
        let rule = match cfg.quadrature.kind {
            QuadratureKind::Grid => tensor_grid(&domain, points),
            QuadratureKind::MonteCarlo => {
                let seed = cfg.quadrature.seed.unwrap_or_else(|| stage_seed(cfg.seed, "quadrature", 0));
                monte_carlo(&domain, points, seed)
            }
        }
        .map_err(|e| bad("quadrature.points", e.to_string()))?;

        cfg.flow.validate()?;
        let ts = &cfg.timestep;
        if !(ts.t_final > 0.0 && ts.t_final.is_finite()) {
            return Err(bad("timestep.t_final", "must be positive"));
        }
        if ts.steps == 0 {
            return Err(bad("timestep.steps", "must be positive"));
        }
        if spec.jump().is_some() && ts.jump_samples == 0 {
            return Err(bad("timestep.jump_samples", "jump operators need at least one sample"));
        }
        let timestep = TimeStepConfig {
            t_final: ts.t_final,
            steps: ts.steps,
            warm_start: ts.warm_start,
            jump_samples: ts.jump_samples,
            flow: cfg.flow.clone(),
        };
        let h = timestep.h();
        let constants = step_constants(&spec, &rule)?;
        if let Some(c) = &constants {
            if h >= c.max_step() {
                return Err(bad(
                    "timestep.steps",
                    format!("h = {h} violates h < 1/(2 lambda2) = {} for the {} operator", c.max_step(), spec.name()),
                ));
            }
        }
        let ex = &cfg.experiment;
        if ex.k_list.contains(&0) {
            return Err(bad("experiment.k_list", "step counts must be positive"));
        }
        if ex.n_list.windows(2).any(|w| w[1] <= w[0]) || ex.n_list.contains(&0) {
            return Err(bad("experiment.n_list", "widths must be positive and strictly increasing"));
        }
        if ex.t_probe.windows(2).any(|w| !(w[0] < w[1])) || ex.t_probe.iter().any(|t| !(*t > 0.0)) {
            return Err(bad("experiment.t_probe", "probe times must be positive and increasing"));
        }
        Ok(Resolved {
            spec,
            u0,
            domain,
            rule,
            act,
            network: cfg.network.clone(),
            timestep,
            constants,
        })
    }
}
