use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use yosida_cli::{execute, list_instances, Command, Options};

#[derive(Parser)]
#[command(name = "yosida", version, about = "Yosida-regularized SDE experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Worker threads; 0 uses every core. Output does not depend on it.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Overrides `[output] dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `[run] seed`.
    #[arg(long)]
    seed_override: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample the monotonicity, coercivity, growth and hemicontinuity conditions.
    CheckAssumptions(RunArgs),
    /// Integrate one path per lambda and dump it.
    Solve(RunArgs),
    /// Coupled lambda sweep against the implicit reference.
    Converge(RunArgs),
    /// A priori, family and Lipschitz estimates.
    Estimates(RunArgs),
    /// Print the operator instances a config may name.
    ListInstances,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, args) = match cli.command {
        Cmd::ListInstances => {
            print!("{}", list_instances());
            return ExitCode::SUCCESS;
        }
        Cmd::CheckAssumptions(a) => (Command::CheckAssumptions, a),
        Cmd::Solve(a) => (Command::Solve, a),
        Cmd::Converge(a) => (Command::Converge, a),
        Cmd::Estimates(a) => (Command::Estimates, a),
    };
    let opts = Options {
        config: args.config,
        jobs: args.jobs,
        out: args.out,
        seed_override: args.seed_override,
    };
    match execute(cmd, &opts) {
        Ok(outcome) => {
            print!("{}", outcome.summary);
            println!("artifacts in {}", outcome.dir.display());
            ExitCode::from(if outcome.pass { 0 } else { 1 })
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
