use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use zsirl::config::Algorithm;
use zsirl::experiment::{Baseline, EvalKind, Experiment};
use zsirl::Error;

#[derive(Parser)]
#[command(name = "zsirl", version, about = "Zero-sum chase game solvers and inverse RL")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Versioned TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config's out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Exact Shapley solution of an enumerable game.
    Oracle(Common),
    /// Adversarial Nash training under a known reward.
    SolveNash(Common),
    /// Epsilon-corrupted demonstrations from a policy pair.
    GenDemos(Common),
    /// Reward recovery from demonstrations.
    TrainIrl(Common),
    /// Comparison methods.
    Baseline {
        #[arg(value_enum)]
        method: Method,
        #[command(flatten)]
        common: Common,
    },
    Eval {
        #[arg(value_enum)]
        metric: Metric,
        /// Matchup layout.
        #[arg(long)]
        table: Option<u32>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Birl,
    Dirl,
    Qp,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Corr,
    Kl,
    Deterioration,
    Matchup,
}

fn open(common: &Common, expected: Option<Algorithm>) -> zsirl::Result<Experiment> {
    let exp = Experiment::load(common.config.as_deref(), common.seed, common.out.as_deref())?;
    if let (Some(want), Some(have)) = (expected, exp.config.algorithm) {
        if want != have {
            return Err(Error::Config(format!("config is for algorithm {have:?}, not {want:?}")));
        }
    }
    Ok(exp)
}

fn run(cli: Cli) -> zsirl::Result<Vec<String>> {
    match cli.command {
        Command::Oracle(c) => open(&c, Some(Algorithm::Oracle))?.oracle(),
        Command::SolveNash(c) => open(&c, Some(Algorithm::Nash))?.solve_nash(),
        Command::GenDemos(c) => open(&c, None)?.gen_demos(),
        Command::TrainIrl(c) => open(&c, Some(Algorithm::Irl))?.train_irl(),
        Command::Baseline { method, common } => {
            let (alg, which) = match method {
                Method::Birl => (Algorithm::Birl, Baseline::Birl),
                Method::Dirl => (Algorithm::Dirl, Baseline::Dirl),
                Method::Qp => (Algorithm::Qp, Baseline::Qp),
            };
            open(&common, Some(alg))?.baseline(which)
        }
        Command::Eval { metric, table, common } => {
            let which = match metric {
                Metric::Corr => EvalKind::Corr,
                Metric::Kl => EvalKind::Kl,
                Metric::Deterioration => EvalKind::Deterioration,
                Metric::Matchup => EvalKind::Matchup,
            };
            open(&common, None)?.eval(which, table)
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        Some(Error::Numeric(_)) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on bad arguments, matching config errors.
    let cli = Cli::parse();
    match run(cli).context("zsirl failed") {
        Ok(lines) => {
            for line in lines {
                println!("{line}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
