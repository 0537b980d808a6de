use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use segregate_cli::config::{schema_json, ExperimentConfig};
use segregate_cli::{oracle, run};

#[derive(Parser)]
#[command(name = "segregate", version, about = "Nonlocal segregation experiments")]
struct Cli {
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true, env = "SEGREGATE_THREADS")]
    threads: Option<usize>,
    /// Artifact directory, overriding the config.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Informational checks count as failures.
    #[arg(long, global = true)]
    strict: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the schedule, analyse and report.
    Run { config: PathBuf },
    /// Parse and check a config, build its first stage and validate the
    /// boundary data.
    Validate { config: PathBuf },
    /// Re-analyse a finished artifact directory.
    Analyze { state_dir: PathBuf },
    /// Independent oracles.
    Oracle {
        #[command(subcommand)]
        which: OracleCommand,
    },
    /// Print the config JSON schema.
    Schema,
}

#[derive(Subcommand)]
enum OracleCommand {
    /// Annulus problem reduced to the radius.
    Radial {
        #[arg(long)]
        a: f64,
        #[arg(long)]
        b: f64,
        #[arg(long)]
        fa: f64,
        #[arg(long)]
        fb: f64,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long, default_value_t = 2000)]
        n_r: usize,
    },
}

fn output_dir(cli: &Cli, cfg: &ExperimentConfig, config: &std::path::Path) -> PathBuf {
    cli.output.clone().or_else(|| cfg.output.clone()).unwrap_or_else(|| {
        let stem = config.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
        PathBuf::from("out").join(stem)
    })
}

fn execute(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(config)?;
            let out = output_dir(cli, &cfg, config);
            let report = run::run(&cfg, &out, cli.strict)?;
            print!("{}", report.to_text());
            println!("artifacts: {}", out.display());
            Ok(report.pass)
        }
        Command::Validate { config } => {
            let cfg = ExperimentConfig::load(config)?;
            let eps = cfg.epsilons()[0];
            let setup = run::stage_setup(&cfg, eps)?;
            let v = segregate_core::grid::validate_boundary_data(&setup.bd, &setup.gd, &cfg.norm, &cfg.analysis.density)
                .context("validating boundary data")?;
            for c in &v.checks {
                println!("{} {} measured {:.6} required {:.6}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.measured, c.required);
            }
            println!("{}: {} stages, K = {}, first lattice {} x {} at h = {}", config.display(), cfg.epsilons().len(), setup.bd.k(), setup.gd.nx, setup.gd.ny, setup.gd.h);
            Ok(v.passed())
        }
        Command::Analyze { state_dir } => {
            let out = cli.output.clone().unwrap_or_else(|| state_dir.clone());
            let report = run::analyze_dir(state_dir, &out, cli.strict)?;
            print!("{}", report.to_text());
            Ok(report.pass)
        }
        Command::Oracle { which: OracleCommand::Radial { a, b, fa, fb, epsilon, n_r } } => {
            let csv = match (&cli.output, epsilon) {
                (Some(dir), Some(_)) => {
                    std::fs::create_dir_all(dir)?;
                    Some(dir.join("radial.csv"))
                }
                _ => None,
            };
            let s = oracle::radial(*a, *b, *fa, *fb, *epsilon, *n_r, csv.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&s)?);
            Ok(true)
        }
        Command::Schema => {
            print!("{}", schema_json());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
