//! `qliom` — batch driver for the disordered-chain quasi-LIOM engine.

mod commands;
mod config;
mod reports;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use commands::Outcome;
use config::RunConfig;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "qliom", version, about = "quasi-local integrals of motion for disordered spin chains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// JSON run configuration (see `qliom schema`).
    #[arg(long, short = 'c')]
    config: PathBuf,
    /// Output directory (overrides the config and the QLIOM_OUT env var).
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    n_sites: Option<usize>,
    #[arg(long)]
    range: Option<usize>,
    #[arg(long)]
    coupling: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    perturbation: Option<String>,
    /// Pin the expansion depth instead of deriving it from the coupling.
    #[arg(long)]
    n_star: Option<usize>,
    /// Pin the resonance threshold instead of J^beta.
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    seed0: Option<u64>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    parallelism: Option<usize>,
    /// Ensemble sample count.
    #[arg(long)]
    samples: Option<usize>,
    /// Fiducial cut site for transport and dynamics.
    #[arg(long)]
    i_star: Option<usize>,
    #[arg(long)]
    t_max: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the diagonalization scheme per seed and write summaries.
    Build(CommonArgs),
    /// Structural verification suites with pass/fail reports.
    Verify(CommonArgs),
    /// Monte Carlo resonance and cluster statistics.
    Ensemble(CommonArgs),
    /// Static transport observables per realization.
    Transport(CommonArgs),
    /// Exact real-time dynamics traces.
    Dynamics(CommonArgs),
    /// Print the configuration schema template.
    Schema,
}

fn apply_overrides(cfg: &mut RunConfig, args: &CommonArgs) {
    if let Some(v) = &args.output_dir {
        cfg.output_dir = Some(v.clone());
    }
    if let Some(v) = args.n_sites {
        cfg.params.n_sites = v;
    }
    if let Some(v) = args.range {
        cfg.params.range = v;
    }
    if let Some(v) = args.coupling {
        cfg.params.coupling = v;
    }
    if let Some(v) = args.beta {
        cfg.params.beta = v;
    }
    if let Some(v) = args.epsilon {
        cfg.params.epsilon = v;
    }
    if let Some(v) = &args.perturbation {
        cfg.params.perturbation = v.clone();
    }
    if let Some(v) = args.n_star {
        cfg.params.n_star = Some(v);
    }
    if let Some(v) = args.delta {
        cfg.params.delta = Some(v);
    }
    match (args.seed0, args.count) {
        (None, None) => {}
        (s, c) => {
            let (old_s, old_c) = match &cfg.seeds {
                config::SeedSpec::Range { seed0, count } => (*seed0, *count),
                config::SeedSpec::List { list } => (list.first().copied().unwrap_or(1), list.len()),
            };
            cfg.seeds = config::SeedSpec::Range {
                seed0: s.unwrap_or(old_s),
                count: c.unwrap_or(old_c),
            };
        }
    }
    if let Some(v) = args.parallelism {
        cfg.parallelism = v;
    }
    if let Some(v) = args.samples {
        cfg.ensemble.samples = v;
    }
    if let Some(v) = args.i_star {
        cfg.transport.i_star = Some(v);
        cfg.dynamics.i_star = Some(v);
    }
    if let Some(v) = args.t_max {
        cfg.dynamics.t_max = v;
    }
    if let Some(v) = args.steps {
        cfg.dynamics.steps = v;
    }
}

fn load(args: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    apply_overrides(&mut cfg, args);
    cfg.validate()?;
    Ok(cfg)
}

fn run(command: &Command) -> Result<Outcome> {
    match command {
        Command::Build(args) => commands::cmd_build(&load(args)?),
        Command::Verify(args) => commands::cmd_verify(&load(args)?),
        Command::Ensemble(args) => commands::cmd_ensemble(&load(args)?),
        Command::Transport(args) => commands::cmd_transport(&load(args)?),
        Command::Dynamics(args) => commands::cmd_dynamics(&load(args)?),
        Command::Schema => {
            commands::cmd_schema(&mut std::io::stdout())?;
            Ok(Outcome::Ok)
        }
    }
}

fn main() -> ExitCode {
    // one BLAS thread; parallelism comes from the realization pool and the
    // emitted numbers stay independent of the machine's core count
    std::env::set_var("OPENBLAS_NUM_THREADS", "1");
    std::env::set_var("OMP_NUM_THREADS", "1");
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(outcome) => ExitCode::from(outcome.code()),
        Err(err) => {
            eprintln!("error: {err:#}");
            // errors before any compute are configuration errors
            ExitCode::from(2)
        }
    }
}
