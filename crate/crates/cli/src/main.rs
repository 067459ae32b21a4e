use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mftg_core::experiments::{self, Command, ExperimentConfig, RunOptions};

#[derive(Parser, Debug)]
#[command(name = "mftg", version, about = "Experiments on finite mean-field team games")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand, Debug)]
enum Sub {
    /// Sample perturbed laws and compare their mean with quadrature.
    PerturbStats(Common),
    /// Compare closed-form, quadrature and Monte Carlo kernel rows.
    KernelCheck(Common),
    /// Level-0 simulation against level-1 dynamic programming.
    Value(Common),
    /// Full correspondence report including admissibility residuals.
    BridgeCheck(Common),
    /// Best-response dynamics or fictitious play on the lifted game.
    Solve(Common),
    /// Finite-population gaps against the mean-field limit.
    Poc(Common),
}

#[derive(ValueEnum, Clone, Copy, Debug)]
#[value(rename_all = "snake_case")]
enum Backend {
    ClosedForm,
    Quadrature,
    Mc,
}

impl Backend {
    fn name(self) -> &'static str {
        match self {
            Backend::ClosedForm => "closed_form",
            Backend::Quadrature => "quadrature",
            Backend::Mc => "mc",
        }
    }
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    backend: Option<Backend>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, common) = match cli.command {
        Sub::PerturbStats(c) => (Command::PerturbStats, c),
        Sub::KernelCheck(c) => (Command::KernelCheck, c),
        Sub::Value(c) => (Command::Value, c),
        Sub::BridgeCheck(c) => (Command::BridgeCheck, c),
        Sub::Solve(c) => (Command::Solve, c),
        Sub::Poc(c) => (Command::Poc, c),
    };
    if let Some(n) = common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let config = match ExperimentConfig::load(&common.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {}: {e}", common.config.display());
            return ExitCode::from(1);
        }
    };
    let options = RunOptions {
        out: common.out,
        seed: common.seed,
        backend: common.backend.map(|b| b.name().to_string()),
    };
    match experiments::run(command, &config, &options) {
        Ok(outcome) => {
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            if outcome.passed() {
                ExitCode::SUCCESS
            } else {
                for v in &outcome.violations {
                    eprintln!("invariant violated: {v}");
                }
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
