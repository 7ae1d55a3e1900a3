use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use dgflow::{load_config, run, Error, Subcommand};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    Solve,
    Flow,
    Kernel,
    Spectra,
    Converge,
    CheckAssumptions,
}

impl From<Command> for Subcommand {
    fn from(c: Command) -> Self {
        match c {
            Command::Solve => Subcommand::Solve,
            Command::Flow => Subcommand::Flow,
            Command::Kernel => Subcommand::Kernel,
            Command::Spectra => Subcommand::Spectra,
            Command::Converge => Subcommand::Converge,
            Command::CheckAssumptions => Subcommand::CheckAssumptions,
        }
    }
}

/// Neural backward-Euler solvers for parabolic PDEs.
#[derive(Debug, Parser)]
#[command(name = "dgflow", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,

    /// TOML config, or a manifest.json from an earlier run.
    #[arg(long)]
    config: PathBuf,

    /// Output directory. Overrides DGFLOW_OUT and the config's `out`.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Master seed. Overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

fn fail(stage: &str, e: &Error) -> ExitCode {
    let code = if e.is_config() { EXIT_CONFIG } else { EXIT_NUMERIC };
    let (kind, field) = match e {
        Error::Config { field, .. } => ("config", Some(field.as_str())),
        e if e.is_config() => ("config", None),
        _ => ("numerical", None),
    };
    let record = serde_json::json!({
        "status": "error",
        "stage": stage,
        "kind": kind,
        "field": field,
        "message": e.to_string(),
        "exit_code": code,
    });
    eprintln!("{record}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut cfg = match load_config(&cli.config) {
        Ok(c) => c,
        Err(e) => return fail("load_config", &e),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli
        .out
        .or_else(|| std::env::var_os("DGFLOW_OUT").map(PathBuf::from))
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("dgflow-out"));
    let sub: Subcommand = cli.command.into();
    match run(sub, &cfg, &out) {
        Ok(manifest) => {
            println!(
                "{}",
                serde_json::json!({
                    "status": "ok",
                    "subcommand": sub.as_str(),
                    "out": out,
                    "outputs": manifest.outputs.len(),
                    "summary": manifest.summary,
                })
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = fail(sub.as_str(), &e);
            if out.is_dir() {
                let record = serde_json::json!({ "status": "error", "subcommand": sub.as_str(), "message": e.to_string() });
                let _ = std::fs::write(out.join("error.json"), record.to_string());
            }
            code
        }
    }
}
