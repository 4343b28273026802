use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use smp_lab::config::ExperimentConfig;
use smp_lab::{run, Command, GATE_FAILURE};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Sub {
    Simulate,
    Rates,
    Adjoint,
    SecondAdjoint,
    CheckMp,
    Bdg,
    Oracle,
    Accept,
}

impl From<Sub> for Command {
    fn from(s: Sub) -> Self {
        match s {
            Sub::Simulate => Command::Simulate,
            Sub::Rates => Command::Rates,
            Sub::Adjoint => Command::Adjoint,
            Sub::SecondAdjoint => Command::SecondAdjoint,
            Sub::CheckMp => Command::CheckMp,
            Sub::Bdg => Command::Bdg,
            Sub::Oracle => Command::Oracle,
            Sub::Accept => Command::Accept,
        }
    }
}

/// Numerical experiments for the stochastic maximum principle of a
/// controlled stochastic heat equation.
#[derive(Debug, Parser)]
#[command(name = "smp-lab", version)]
struct Args {
    /// Pipeline to run.
    #[arg(value_enum)]
    command: Sub,
    /// TOML experiment configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory (default: `out/<command>`).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let command: Command = args.command.into();
    let mut cfg = match &args.config {
        Some(path) => match ExperimentConfig::load(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        },
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(t) = args.threads {
        cfg.threads = Some(t);
    }
    if let Some(o) = args.out {
        cfg.out = Some(o);
    }
    if let Err(e) = cfg.validate() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    if let Some(t) = cfg.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: cannot start {t} worker threads: {e}");
            return ExitCode::from(4);
        }
    }
    let out = cfg
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("out").join(command.name()));
    match run(command, &cfg, &out) {
        Ok(m) => {
            for c in &m.checks {
                if !c.name.starts_with("time: ") {
                    println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                }
            }
            println!("artifacts: {}", out.display());
            if m.checks.iter().all(|c| c.passed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(GATE_FAILURE as u8)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
