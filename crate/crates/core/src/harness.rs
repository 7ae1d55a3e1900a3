//! Subcommand runners. Each run writes its CSV tables, checkpoints and a
//! `manifest.json` describing the resolved config, derived quantities,
//! per-stage seeds and every output file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{Resolved, RunConfig, SweepKind};
use crate::energy::EnergyContext;
use crate::error::{Error, Result};
use crate::field::Field;
use crate::operators::{trial_networks, AssumptionConstants, OperatorKind};
use crate::quadrature::{inner_product, InnerProduct};
use crate::reference::{error_report, ErrorTable, ExactKind, ExactSolution};
use crate::seeds::stage_seed;
use crate::shallow_net::NetworkParams;
use crate::training::{solve_pde, train, Solution, TimeStepConfig};
use crate::widelimit::{build_ttilde, compare_wide_limit, empirical_kernel, grid_minimizer, spectral_flow, WideLimitProblem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Subcommand {
    Solve,
    Flow,
    Kernel,
    Spectra,
    Converge,
    CheckAssumptions,
}

impl Subcommand {
    pub const ALL: [Subcommand; 6] = [
        Subcommand::Solve,
        Subcommand::Flow,
        Subcommand::Kernel,
        Subcommand::Spectra,
        Subcommand::Converge,
        Subcommand::CheckAssumptions,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Subcommand::Solve => "solve",
            Subcommand::Flow => "flow",
            Subcommand::Kernel => "kernel",
            Subcommand::Spectra => "spectra",
            Subcommand::Converge => "converge",
            Subcommand::CheckAssumptions => "check-assumptions",
        }
    }
}

impl FromStr for Subcommand {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::config("subcommand", format!("unknown subcommand `{s}`")))
    }
}

/// One CSV column: name, unit and the operation that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnDoc {
    pub name: String,
    pub unit: String,
    pub producer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub path: String,
    pub description: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub columns: Vec<ColumnDoc>,
}

/// Quantities computed from the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Derived {
    pub dim: usize,
    pub h: f64,
    pub eta_n: f64,
    pub clip_radius: f64,
    pub box_lower: Vec<f64>,
    pub box_upper: Vec<f64>,
    pub quadrature_nodes: usize,
    pub step_constants: Option<AssumptionConstants>,
    pub max_step: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: Subcommand,
    pub config: RunConfig,
    pub derived: Derived,
    pub seeds: BTreeMap<String, u64>,
    pub outputs: Vec<OutputEntry>,
    /// Headline numbers of the run; not covered by the reproducibility
    /// contract when they include wall times.
    pub summary: serde_json::Value,
}

/// All file output goes through this writer, which also builds the index.
struct OutputWriter {
    dir: PathBuf,
    entries: Vec<OutputEntry>,
}

type Columns<'a> = &'a [(&'a str, &'a str)];

impl OutputWriter {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            entries: Vec::new(),
        })
    }

    fn index(&mut self, name: &str, description: &str, producer: &str, columns: Columns<'_>) {
        self.entries.push(OutputEntry {
            path: name.to_string(),
            description: description.to_string(),
            columns: columns
                .iter()
                .map(|(n, u)| ColumnDoc {
                    name: n.to_string(),
                    unit: u.to_string(),
                    producer: producer.to_string(),
                })
                .collect(),
        });
    }

    fn csv<T: Serialize>(&mut self, name: &str, description: &str, producer: &str, columns: Columns<'_>, rows: &[T]) -> Result<()> {
        let mut w = csv::Writer::from_path(self.dir.join(name))?;
        if rows.is_empty() {
            w.write_record(columns.iter().map(|(n, _)| *n))?;
        }
        for row in rows {
            w.serialize(row)?;
        }
        w.flush()?;
        self.index(name, description, producer, columns);
        Ok(())
    }

    fn csv_records(&mut self, name: &str, description: &str, producer: &str, columns: Columns<'_>, rows: &[Vec<String>]) -> Result<()> {
        let mut w = csv::Writer::from_path(self.dir.join(name))?;
        w.write_record(columns.iter().map(|(n, _)| *n))?;
        for row in rows {
            w.write_record(row)?;
        }
        w.flush()?;
        self.index(name, description, producer, columns);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, description: &str, value: &T) -> Result<()> {
        fs::write(self.dir.join(name), serde_json::to_string_pretty(value)?)?;
        self.index(name, description, "", &[]);
        Ok(())
    }

    fn checkpoint(&mut self, stem: &str, net: &NetworkParams, seed: u64) -> Result<String> {
        let path = self.dir.join(stem);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        checkpoint::save(net, seed, &path)?;
        self.index(&format!("{stem}.json"), "checkpoint header", "shallow_net::checkpoint", &[]);
        self.index(&format!("{stem}.bin"), "checkpoint payload, little-endian f64", "shallow_net::checkpoint", &[]);
        Ok(format!("{stem}.json"))
    }
}

/// Fitted slope of `log y` against `log x` by least squares.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let k = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Reference solution for operators that have one.
pub fn exact_solution(res: &Resolved) -> Option<ExactSolution> {
    let kind = match res.spec.kind() {
        OperatorKind::Heat { kappa } => ExactKind::Heat { kappa: *kappa },
        OperatorKind::BlackScholes { sigma, r } => ExactKind::BlackScholes { sigma: *sigma, r: *r },
        _ => return None,
    };
    Some(ExactSolution::new(
        kind,
        res.u0.clone(),
        (res.domain.lower().to_vec(), res.domain.upper().to_vec()),
    ))
}

fn solution_errors(sol: &Solution, res: &Resolved, exact: &ExactSolution, h: f64) -> Result<ErrorTable> {
    let fields: Vec<_> = sol.steps.iter().map(|p| p.as_field(&res.act)).collect();
    let refs: Vec<&dyn Field> = fields.iter().map(|f| f as &dyn Field).collect();
    let times: Vec<f64> = (1..=fields.len()).map(|k| k as f64 * h).collect();
    error_report(&refs, exact, &res.rule, &times)
}

fn first_step_context(res: &Resolved, seed: u64) -> Result<EnergyContext> {
    let jumps = res.spec.sample_jumps(res.timestep.jump_samples, stage_seed(seed, "jumps", 0))?;
    EnergyContext::new(res.spec.clone(), res.rule.clone(), res.h(), &res.u0, jumps)
}

const STEP_COLUMNS: Columns<'static> = &[
    ("k", "step index"),
    ("t_k", "PDE time"),
    ("final_loss", "energy"),
    ("grad_norm", "parameter-gradient 2-norm"),
    ("flow_time", "flow time"),
    ("accepted_steps", "count"),
    ("rejected_steps", "count"),
    ("violations", "count"),
    ("max_increase", "energy"),
    ("converged", "bool"),
    ("init_seed", "seed"),
];

const ERROR_COLUMNS: Columns<'static> = &[
    ("k", "step index"),
    ("t_k", "PDE time"),
    ("l2_error", "L2 norm"),
    ("h1_error", "H1 norm"),
];

const TRACE_COLUMNS: Columns<'static> = &[
    ("k", "step index"),
    ("t", "flow time"),
    ("loss", "energy"),
    ("grad_norm", "parameter-gradient 2-norm"),
    ("dt", "flow time"),
];

#[derive(Serialize)]
struct StepRow {
    k: usize,
    t_k: f64,
    final_loss: f64,
    grad_norm: f64,
    flow_time: f64,
    accepted_steps: usize,
    rejected_steps: usize,
    violations: usize,
    max_increase: f64,
    converged: bool,
    init_seed: u64,
}

#[derive(Serialize)]
struct TraceRow {
    k: usize,
    t: f64,
    loss: f64,
    grad_norm: f64,
    dt: f64,
}

#[derive(Serialize)]
struct StepRecord<'a> {
    k: usize,
    final_loss: f64,
    grad_norm: f64,
    wall_time: f64,
    checkpoint_path: &'a str,
    warm_start: bool,
}

fn trace_rows(k: usize, trace: &crate::training::TrainingTrace) -> Vec<TraceRow> {
    trace
        .records
        .iter()
        .map(|r| TraceRow {
            k,
            t: r.t,
            loss: r.loss,
            grad_norm: r.grad_norm,
            dt: r.dt,
        })
        .collect()
}

fn run_solve(res: &Resolved, seed: u64, out: &mut OutputWriter, seeds: &mut BTreeMap<String, u64>) -> Result<serde_json::Value> {
    let sol = solve_pde(&res.spec, &res.u0, &res.rule, &res.timestep, &res.network, &res.act, seed)?;
    seeds.insert("jumps".into(), stage_seed(seed, "jumps", 0));
    let mut rows = Vec::new();
    let mut traces = Vec::new();
    let mut records = Vec::new();
    let mut paths = Vec::new();
    for (net, rep) in sol.steps.iter().zip(&sol.reports) {
        seeds.insert(format!("init.{}", rep.k), rep.init_seed);
        paths.push(out.checkpoint(&format!("checkpoints/step_{:03}", rep.k), net, rep.init_seed)?);
    }
    for ((rep, trace), path) in sol.reports.iter().zip(&sol.traces).zip(&paths) {
        rows.push(StepRow {
            k: rep.k,
            t_k: rep.t_k,
            final_loss: rep.final_loss,
            grad_norm: rep.grad_norm,
            flow_time: rep.flow_time,
            accepted_steps: rep.accepted_steps,
            rejected_steps: rep.rejected_steps,
            violations: rep.violations,
            max_increase: rep.max_increase,
            converged: rep.converged,
            init_seed: rep.init_seed,
        });
        records.push(StepRecord {
            k: rep.k,
            final_loss: rep.final_loss,
            grad_norm: rep.grad_norm,
            wall_time: rep.wall_time,
            checkpoint_path: path,
            warm_start: res.timestep.warm_start,
        });
        traces.extend(trace_rows(rep.k, trace));
    }
    out.csv("steps.csv", "per-step training diagnostics", "training::solve_pde", STEP_COLUMNS, &rows)?;
    out.csv("traces.csv", "loss and gradient-norm traces", "training::train", TRACE_COLUMNS, &traces)?;
    out.json("steps.json", "per-step records", &records)?;
    let mut summary = serde_json::json!({
        "steps": sol.steps.len(),
        "violations": sol.reports.iter().map(|r| r.violations).sum::<usize>(),
        "final_loss": sol.reports.last().map(|r| r.final_loss),
    });
    if let Some(exact) = exact_solution(res) {
        let table = solution_errors(&sol, res, &exact, res.h())?;
        out.csv("errors.csv", "errors against the reference solution", "reference::error_report", ERROR_COLUMNS, &table.rows)?;
        summary["max_l2_error"] = table.max_l2.into();
        summary["max_h1_error"] = table.max_h1.into();
    }
    Ok(summary)
}

fn run_flow(res: &Resolved, seed: u64, out: &mut OutputWriter, seeds: &mut BTreeMap<String, u64>) -> Result<serde_json::Value> {
    let ctx = first_step_context(res, seed)?;
    let init_seed = stage_seed(seed, "init", 1);
    seeds.insert("init.1".into(), init_seed);
    seeds.insert("jumps".into(), stage_seed(seed, "jumps", 0));
    let init = res.network.init(res.spec.dim(), init_seed)?;
    out.checkpoint("checkpoints/initial", &init, init_seed)?;
    let (net, trace) = train(&ctx, init, &res.act, &res.timestep.flow)?;
    out.checkpoint("checkpoints/final", &net, init_seed)?;
    out.csv("trace.csv", "loss and gradient-norm trace", "training::train", TRACE_COLUMNS, &trace_rows(1, &trace))?;
    Ok(serde_json::json!({
        "final_loss": trace.final_loss,
        "final_grad_norm": trace.final_grad_norm,
        "flow_time": trace.final_t,
        "accepted_steps": trace.accepted_steps,
        "rejected_steps": trace.rejected_steps,
        "violations": trace.violations,
        "converged": trace.converged,
    }))
}

fn node_rows(res: &Resolved) -> (Vec<(String, String)>, Vec<Vec<String>>) {
    let d = res.rule.dim();
    let mut cols = vec![("i".to_string(), "node index".to_string())];
    cols.extend((0..d).map(|k| (format!("x{k}"), "space".to_string())));
    cols.push(("weight".into(), "volume".into()));
    let rows = res
        .rule
        .nodes()
        .zip(res.rule.weights())
        .enumerate()
        .map(|(i, (x, w))| {
            let mut row = vec![i.to_string()];
            row.extend(x.iter().map(|v| v.to_string()));
            row.push(w.to_string());
            row
        })
        .collect();
    (cols, rows)
}

fn write_nodes(res: &Resolved, out: &mut OutputWriter) -> Result<()> {
    let (cols, rows) = node_rows(res);
    let cols: Vec<(&str, &str)> = cols.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
    out.csv_records("nodes.csv", "quadrature nodes", "quadrature::rule", &cols, &rows)
}

fn run_kernel(res: &Resolved, cfg: &RunConfig, seed: u64, out: &mut OutputWriter, seeds: &mut BTreeMap<String, u64>) -> Result<serde_json::Value> {
    let kseed = stage_seed(seed, "kernel", 0);
    seeds.insert("kernel".into(), kseed);
    let kernel = empirical_kernel(&res.rule, cfg.experiment.kernel_samples, kseed, &res.act)?;
    write_nodes(res, out)?;
    let g = kernel.len();
    let mut rows = Vec::with_capacity(g * (g + 1) / 2);
    for i in 0..g {
        for j in i..g {
            rows.push(vec![i.to_string(), j.to_string(), kernel.z[(i, j)].to_string(), kernel.se[(i, j)].to_string()]);
        }
    }
    out.csv_records(
        "kernel.csv",
        "empirical kernel Z, upper triangle",
        "widelimit::empirical_kernel",
        &[("i", "node index"), ("j", "node index"), ("z", "kernel value"), ("se", "Monte Carlo standard error")],
        &rows,
    )?;
    let (lo, hi) = kernel.eigen_range();
    Ok(serde_json::json!({
        "nodes": g,
        "samples": kernel.samples,
        "asymmetry": kernel.asymmetry(),
        "eigen_min": lo,
        "eigen_max": hi,
    }))
}

fn run_spectra(res: &Resolved, cfg: &RunConfig, seed: u64, out: &mut OutputWriter, seeds: &mut BTreeMap<String, u64>) -> Result<serde_json::Value> {
    let ctx = first_step_context(res, seed)?;
    let kseed = stage_seed(seed, "kernel", 0);
    seeds.insert("kernel".into(), kseed);
    seeds.insert("jumps".into(), stage_seed(seed, "jumps", 0));
    let w_star = grid_minimizer(&ctx)?;
    let kernel = empirical_kernel(&res.rule, cfg.experiment.kernel_samples, kseed, &res.act)?;
    let tt = build_ttilde(&kernel, &ctx)?;
    let zero = vec![0.0; res.rule.len()];
    let flow = spectral_flow(&tt, &zero, &w_star.values)?;
    #[derive(Serialize)]
    struct Row {
        i: usize,
        gamma: f64,
        h0: f64,
    }
    let rows: Vec<Row> = flow
        .gammas
        .iter()
        .zip(&flow.h0)
        .enumerate()
        .map(|(i, (g, h))| Row { i, gamma: *g, h0: *h })
        .collect();
    out.csv(
        "spectra.csv",
        "eigenvalues of the limit operator and initial coefficients",
        "widelimit::spectral_flow",
        &[("i", "mode index"), ("gamma", "decay rate per flow time"), ("h0", "Htilde coefficient")],
        &rows,
    )?;
    #[derive(Serialize)]
    struct DecayRow {
        t: f64,
        deviation: f64,
    }
    let decay: Vec<DecayRow> = cfg
        .experiment
        .t_probe
        .iter()
        .map(|&t| DecayRow {
            t,
            deviation: flow.norm_sq(t).max(0.0).sqrt(),
        })
        .collect();
    out.csv(
        "decay.csv",
        "distance of the limit flow to the minimizer",
        "widelimit::spectral_flow",
        &[("t", "flow time"), ("deviation", "Htilde norm")],
        &decay,
    )?;
    Ok(serde_json::json!({
        "gamma_min": flow.gamma_min(),
        "gamma_max": flow.gamma_max(),
        "self_adjoint_defect": tt.self_adjoint_defect(),
        "initial_deviation": flow.norm_sq(0.0).max(0.0).sqrt(),
    }))
}

#[derive(Debug, Clone, Serialize)]
struct SweepRow {
    steps: usize,
    h: f64,
    max_l2_error: f64,
    max_h1_error: f64,
    ratio_to_next: Option<f64>,
    fitted_rate: f64,
    fitted_ratio: f64,
    violations: usize,
}

#[derive(Serialize)]
struct SweepErrorRow {
    steps: usize,
    k: usize,
    t_k: f64,
    l2_error: f64,
    h1_error: f64,
}

fn run_k_sweep(res: &Resolved, cfg: &RunConfig, seed: u64, out: &mut OutputWriter, seeds: &mut BTreeMap<String, u64>) -> Result<serde_json::Value> {
    let exact = exact_solution(res).ok_or_else(|| {
        Error::config(
            "problem.operator",
            format!("a step-size sweep needs a reference solution, which the {} operator lacks", res.spec.name()),
        )
    })?;
    let ks = &cfg.experiment.k_list;
    if ks.len() < 2 {
        return Err(Error::config("experiment.k_list", "a sweep needs at least two step counts"));
    }
    for &k in ks {
        let h = res.timestep.t_final / k as f64;
        if let Some(c) = &res.constants {
            if h >= c.max_step() {
                return Err(Error::config(
                    "experiment.k_list",
                    format!("K = {k} gives h = {h}, violating h < 1/(2 lambda2) = {}", c.max_step()),
                ));
            }
        }
    }
    seeds.insert("jumps".into(), stage_seed(seed, "jumps", 0));
    // Sweep points are independent; results are gathered in input order.
    let results: Vec<Result<(Solution, ErrorTable)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = ks
            .iter()
            .map(|&k| {
                let exact = &exact;
                scope.spawn(move || {
                    let tcfg = TimeStepConfig {
                        steps: k,
                        ..res.timestep.clone()
                    };
                    let sol = solve_pde(&res.spec, &res.u0, &res.rule, &tcfg, &res.network, &res.act, seed)?;
                    let table = solution_errors(&sol, res, exact, tcfg.h())?;
                    Ok((sol, table))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::NonFinite("sweep worker panicked".into()))))
            .collect()
    });
    let mut sols = Vec::with_capacity(ks.len());
    for r in results {
        sols.push(r?);
    }
    let hs: Vec<f64> = ks.iter().map(|&k| res.timestep.t_final / k as f64).collect();
    let errs: Vec<f64> = sols.iter().map(|(_, t)| t.max_l2).collect();
    let rate = loglog_slope(&hs, &errs);
    let mut rows = Vec::new();
    let mut detail = Vec::new();
    for (i, (&k, (sol, table))) in ks.iter().zip(&sols).enumerate() {
        for rep in &sol.reports {
            seeds.insert(format!("init.{}", rep.k), rep.init_seed);
        }
        rows.push(SweepRow {
            steps: k,
            h: hs[i],
            max_l2_error: table.max_l2,
            max_h1_error: table.max_h1,
            ratio_to_next: errs.get(i + 1).map(|e| table.max_l2 / e),
            fitted_rate: rate,
            fitted_ratio: 2f64.powf(rate),
            violations: sol.reports.iter().map(|r| r.violations).sum(),
        });
        detail.extend(table.rows.iter().map(|r| SweepErrorRow {
            steps: k,
            k: r.k,
            t_k: r.t_k,
            l2_error: r.l2_error,
            h1_error: r.h1_error,
        }));
    }
    out.csv(
        "converge.csv",
        "maximum errors per step count with fitted order",
        "reference::error_report",
        &[
            ("steps", "K"),
            ("h", "PDE time"),
            ("max_l2_error", "L2 norm"),
            ("max_h1_error", "H1 norm"),
            ("ratio_to_next", "error ratio per halving of h"),
            ("fitted_rate", "log-log slope in h"),
            ("fitted_ratio", "2^fitted_rate"),
            ("violations", "count"),
        ],
        &rows,
    )?;
    out.csv(
        "converge_errors.csv",
        "per-step errors for every step count",
        "reference::error_report",
        &[("steps", "K"), ("k", "step index"), ("t_k", "PDE time"), ("l2_error", "L2 norm"), ("h1_error", "H1 norm")],
        &detail,
    )?;
    Ok(serde_json::json!({
        "fitted_rate": rate,
        "fitted_ratio": 2f64.powf(rate),
        "max_l2_errors": errs,
        "violations": rows.iter().map(|r| r.violations).sum::<usize>(),
    }))
}

fn run_n_sweep(res: &Resolved, cfg: &RunConfig, seed: u64, out: &mut OutputWriter, seeds: &mut BTreeMap<String, u64>) -> Result<serde_json::Value> {
    let ctx = first_step_context(res, seed)?;
    seeds.insert("kernel".into(), stage_seed(seed, "kernel", 0));
    seeds.insert("jumps".into(), stage_seed(seed, "jumps", 0));
    let ex = &cfg.experiment;
    let problem = WideLimitProblem {
        ctx: &ctx,
        act: &res.act,
        delta: res.network.delta,
        kernel_samples: ex.kernel_samples,
        flow: res.timestep.flow.clone(),
    };
    let table = compare_wide_limit(&problem, &ex.n_list, &ex.t_probe, ex.trials, seed)?;
    out.csv(
        "wide_limit.csv",
        "H1 distance between trained networks and the limit flow",
        "widelimit::compare_wide_limit",
        &[("n", "width"), ("t", "flow time"), ("mean_error", "H1 norm"), ("std_error", "H1 norm")],
        &table.rows,
    )?;
    let ns: Vec<f64> = table.sup_errors.iter().map(|(n, _)| *n as f64).collect();
    let sups: Vec<f64> = table.sup_errors.iter().map(|(_, e)| *e).collect();
    let slope = if ns.len() > 1 { loglog_slope(&ns, &sups) } else { f64::NAN };
    #[derive(Serialize)]
    struct SupRow {
        n: usize,
        sup_mean_error: f64,
        fitted_slope: f64,
    }
    let rows: Vec<SupRow> = table
        .sup_errors
        .iter()
        .map(|(n, e)| SupRow {
            n: *n,
            sup_mean_error: *e,
            fitted_slope: slope,
        })
        .collect();
    out.csv(
        "wide_limit_sup.csv",
        "supremum over probe times of the mean error",
        "widelimit::compare_wide_limit",
        &[("n", "width"), ("sup_mean_error", "H1 norm"), ("fitted_slope", "log-log slope in n")],
        &rows,
    )?;
    Ok(serde_json::json!({
        "sup_errors": sups,
        "fitted_slope": slope,
        "gamma_min": table.gamma_min,
        "gamma_max": table.gamma_max,
        "monotone": sups.windows(2).all(|w| w[1] < w[0]),
    }))
}

/// `2 lambda (e + 1)`.
pub fn merton_jump_bound(lambda: f64) -> f64 {
    2.0 * lambda * (std::f64::consts::E + 1.0)
}

fn run_check(res: &Resolved, cfg: &RunConfig, seed: u64, out: &mut OutputWriter, seeds: &mut BTreeMap<String, u64>) -> Result<serde_json::Value> {
    let tseed = stage_seed(seed, "trials", 0);
    seeds.insert("trials".into(), tseed);
    let nets = trial_networks(res.spec.dim(), cfg.experiment.trial_networks, res.network.width, tseed)?;
    let trials: Vec<_> = nets.iter().map(|n| n.forward(&res.act, &res.rule)).collect();
    let emp = res.spec.estimate_constants(&trials, &res.rule)?;
    let analytic = res.spec.analytic_constants();
    #[derive(Serialize)]
    struct Row {
        quantity: &'static str,
        source: &'static str,
        value: f64,
    }
    let mut rows = vec![
        Row {
            quantity: "M",
            source: "empirical",
            value: emp.m,
        },
        Row {
            quantity: "lambda1",
            source: "empirical",
            value: emp.lambda1,
        },
        Row {
            quantity: "lambda2",
            source: "empirical",
            value: emp.lambda2,
        },
    ];
    if let Some(a) = &analytic {
        rows.push(Row {
            quantity: "M",
            source: "analytic",
            value: a.m,
        });
        rows.push(Row {
            quantity: "lambda1",
            source: "analytic",
            value: a.lambda1,
        });
        rows.push(Row {
            quantity: "lambda2",
            source: "analytic",
            value: a.lambda2,
        });
    }
    out.csv(
        "constants.csv",
        "continuity and Gårding constants",
        "operators::estimate_constants",
        &[("quantity", "name"), ("source", "analytic or empirical"), ("value", "dimensionless")],
        &rows,
    )?;

    #[derive(Serialize)]
    struct Check {
        check: String,
        value: f64,
        bound: f64,
        holds: bool,
    }
    let mut checks = Vec::new();
    // Gårding on every trial with the fitted constants
    let coeffs = res.spec.coefficients_at(&res.rule)?;
    let mut garding_violations = 0usize;
    let mut worst_gap = f64::INFINITY;
    for u in &trials {
        let a = inner_product(u, u, &res.rule, InnerProduct::AForm(&coeffs))?;
        let h1 = inner_product(u, u, &res.rule, InnerProduct::H1)?;
        let l2 = inner_product(u, u, &res.rule, InnerProduct::L2)?;
        let gap = a - (emp.lambda1 * h1 - emp.lambda2 * l2);
        worst_gap = worst_gap.min(gap);
        if gap < -1e-12 * h1.max(1.0) {
            garding_violations += 1;
        }
    }
    checks.push(Check {
        check: "garding_violations".into(),
        value: garding_violations as f64,
        bound: 0.0,
        holds: garding_violations == 0,
    });
    match res.spec.kind() {
        OperatorKind::BlackScholes { sigma, r } | OperatorKind::Merton { sigma, r, .. } => {
            let bound = 0.5 * sigma * sigma + r.abs() + 1e-3;
            checks.push(Check {
                check: "continuity_M".into(),
                value: emp.m,
                bound,
                holds: emp.m <= bound,
            });
        }
        _ => {}
    }
    if let Some(law) = res.spec.jump() {
        let jseed = stage_seed(seed, "jumps", 0);
        seeds.insert("jumps".into(), jseed);
        let jumps = res
            .spec
            .sample_jumps(res.timestep.jump_samples, jseed)?
            .ok_or_else(|| Error::MissingData("jump samples".into()))?;
        let bound = merton_jump_bound(law.lambda);
        let mut worst = 0.0f64;
        let mut violations = 0usize;
        for (net, nf) in nets.iter().zip(&trials) {
            let field = net.as_field(&res.act);
            let jump = res.spec.jump_part_nodes(&field, &res.rule, &jumps)?;
            let lhs: f64 = jump.iter().zip(res.rule.weights()).map(|(v, w)| w * v * v).sum();
            let h1 = inner_product(nf, nf, &res.rule, InnerProduct::H1)?;
            if h1 > 0.0 {
                let ratio = lhs / h1;
                worst = worst.max(ratio);
                if ratio > bound {
                    violations += 1;
                }
            }
        }
        checks.push(Check {
            check: "jump_bound_ratio_max".into(),
            value: worst,
            bound,
            holds: violations == 0,
        });
    }
    out.csv(
        "checks.csv",
        "assumption checks on random networks",
        "operators::estimate_constants",
        &[("check", "name"), ("value", "dimensionless"), ("bound", "dimensionless"), ("holds", "bool")],
        &checks,
    )?;
    Ok(serde_json::json!({
        "empirical": emp,
        "analytic": analytic,
        "worst_garding_gap": worst_gap,
        "all_hold": checks.iter().all(|c| c.holds),
    }))
}

/// Runs `sub` with `cfg`, writing every artifact into `out_dir`.
pub fn run(sub: Subcommand, cfg: &RunConfig, out_dir: &Path) -> Result<RunManifest> {
    let mut cfg = cfg.clone();
    cfg.fill_defaults()?;
    let res = cfg.resolve()?;
    let seed = cfg.seed;
    let started = Instant::now();
    let mut out = OutputWriter::new(out_dir)?;
    let mut seeds = BTreeMap::new();
    seeds.insert("master".to_string(), seed);
    if cfg.quadrature.kind == crate::config::QuadratureKind::MonteCarlo {
        seeds.insert("quadrature".into(), cfg.quadrature.seed.unwrap_or_else(|| stage_seed(seed, "quadrature", 0)));
    }
    let mut summary = match sub {
        Subcommand::Solve => run_solve(&res, seed, &mut out, &mut seeds)?,
        Subcommand::Flow => run_flow(&res, seed, &mut out, &mut seeds)?,
        Subcommand::Kernel => run_kernel(&res, &cfg, seed, &mut out, &mut seeds)?,
        Subcommand::Spectra => run_spectra(&res, &cfg, seed, &mut out, &mut seeds)?,
        Subcommand::Converge => match cfg.experiment.sweep {
            SweepKind::K => run_k_sweep(&res, &cfg, seed, &mut out, &mut seeds)?,
            SweepKind::N => run_n_sweep(&res, &cfg, seed, &mut out, &mut seeds)?,
        },
        Subcommand::CheckAssumptions => run_check(&res, &cfg, seed, &mut out, &mut seeds)?,
    };
    summary["wall_time"] = started.elapsed().as_secs_f64().into();
    let manifest = RunManifest {
        tool: "dgflow".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        subcommand: sub,
        config: cfg.clone(),
        derived: Derived {
            dim: res.spec.dim(),
            h: res.h(),
            eta_n: res.learning_rate(),
            clip_radius: res.network.radius(),
            box_lower: res.domain.lower().to_vec(),
            box_upper: res.domain.upper().to_vec(),
            quadrature_nodes: res.rule.len(),
            step_constants: res.constants,
            max_step: res.constants.map(|c| c.max_step()).filter(|v| v.is_finite()),
        },
        seeds,
        outputs: out.entries.clone(),
        summary,
    };
    fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::from_toml_str;

    fn small(op: &str) -> RunConfig {
        let mut cfg = from_toml_str(&format!(
            "seed = 3\nproblem = \"{op}\"\n[network]\nwidth = 16\n[quadrature]\npoints = 40\n[flow]\nt_end = 0.5\ndt = 0.05\n[timestep]\nsteps = 2\n[experiment]\nkernel_samples = 2000\ntrial_networks = 50\nk_list = [2, 4]\nn_list = [8, 16]\nt_probe = [0.1, 0.2]\n"
        ))
        .unwrap();
        cfg.fill_defaults().unwrap();
        cfg
    }

    #[test]
    fn subcommand_names_round_trip() {
        for s in Subcommand::ALL {
            assert_eq!(s.as_str().parse::<Subcommand>().unwrap(), s);
        }
        assert!("train".parse::<Subcommand>().unwrap_err().is_config());
    }

    #[test]
    fn loglog_slope_of_power_law() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(-0.25)).collect();
        assert!((loglog_slope(&x, &y) + 0.25).abs() < 1e-12);
    }

    #[test]
    fn solve_writes_indexed_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let m = run(Subcommand::Solve, &small("heat"), dir.path()).unwrap();
        for e in &m.outputs {
            assert!(dir.path().join(&e.path).exists(), "{}", e.path);
        }
        assert!(m.outputs.iter().any(|e| e.path == "errors.csv"));
        assert!(dir.path().join("manifest.json").exists());
        assert_eq!(m.seeds["master"], 3);
        let text = fs::read_to_string(dir.path().join("errors.csv")).unwrap();
        assert!(text.starts_with("k,t_k,l2_error,h1_error"));
    }

    #[test]
    fn every_subcommand_runs_on_a_small_problem() {
        for sub in Subcommand::ALL {
            let dir = tempfile::tempdir().unwrap();
            let mut cfg = small("heat");
            if sub == Subcommand::Converge {
                cfg.experiment.k_list = vec![1, 2];
            }
            let m = run(sub, &cfg, dir.path()).unwrap_or_else(|e| panic!("{}: {e}", sub.as_str()));
            assert_eq!(m.subcommand, sub);
            assert!(!m.outputs.is_empty());
        }
    }

    #[test]
    fn converge_without_reference_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let e = run(Subcommand::Converge, &small("allen_cahn"), dir.path()).unwrap_err();
        assert!(e.is_config(), "{e}");
    }
}
