//! `sinkformers` experiment runner. Every command resolves its configuration
//! (defaults, then `--config`, then flags), writes it next to its outputs as
//! `<command>.config.json`, and writes outputs atomically.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::RunContext;

#[derive(Parser)]
#[command(name = "sinkformers", version, about = "Sinkhorn attention experiments")]
struct Cli {
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for outputs and the resolved config (default: current directory).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// JSON object of command parameters; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scale exp(C) to a doubly stochastic kernel; writes K and (f, g).
    Sinkhorn(commands::SinkhornArgs),
    /// Column-sum statistics of an attention matrix.
    Colsums(commands::ColsumsArgs),
    /// Euler-integrate the particle flow of an attention field.
    Flow(commands::FlowArgs),
    /// Bandwidth sweep of the rescaled field against its analytic limit.
    DiffusionLimit(commands::DiffusionArgs),
    /// Sinkhorn particle dynamics as a heat-equation solver.
    HeatSim(commands::HeatArgs),
    /// Train the toy set classifier.
    Train(commands::TrainArgs),
    /// Finite-difference check of the classifier gradients.
    Gradcheck(commands::GradcheckArgs),
    /// Symmetry defect of the stacked Jacobian of an attention field.
    Jacobian(commands::JacobianArgs),
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let ctx = RunContext {
        file: cli.config.as_deref().map(config::load_file).transpose()?,
        seed: cli.seed,
        out: output::OutDir::new(cli.out_dir),
    };
    match &cli.command {
        Command::Sinkhorn(a) => commands::sinkhorn(&ctx, a),
        Command::Colsums(a) => commands::colsums(&ctx, a),
        Command::Flow(a) => commands::flow(&ctx, a),
        Command::DiffusionLimit(a) => commands::diffusion_limit(&ctx, a),
        Command::HeatSim(a) => commands::heat_sim(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Gradcheck(a) => commands::gradcheck(&ctx, a),
        Command::Jacobian(a) => commands::jacobian(&ctx, a),
    }
}

fn main() -> ExitCode {
    // Usage errors exit with 2 inside `parse`.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
