//! Experiment driver for the `spde-smp` laboratory: configuration, pipelines,
//! artifact persistence and the acceptance suite.

pub mod accept;
pub mod artifacts;
pub mod commands;
pub mod config;

use std::path::Path;
use std::time::Instant;

use artifacts::{ArtifactWriter, Check, ManifestInfo, RunManifest};
use config::{ConfigError, ExperimentConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("numerical abort during {stage}: {source}")]
    Numerical {
        stage: String,
        #[source]
        source: spde_smp::Error,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical { .. } => 3,
            CliError::Io(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Exit code when the run completed but a gate failed.
pub const GATE_FAILURE: i32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Rates,
    Adjoint,
    SecondAdjoint,
    CheckMp,
    Bdg,
    Oracle,
    Accept,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Rates => "rates",
            Command::Adjoint => "adjoint",
            Command::SecondAdjoint => "second-adjoint",
            Command::CheckMp => "check-mp",
            Command::Bdg => "bdg",
            Command::Oracle => "oracle",
            Command::Accept => "accept",
        }
    }
}

/// Runs one pipeline into `out` and writes its manifest.
pub fn run(command: Command, cfg: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    if command == Command::Accept {
        return accept::run_accept(cfg, out).map(|o| o.manifest);
    }
    let start = Instant::now();
    let mut w = ArtifactWriter::create(out)?;
    let checks: Vec<Check> = match command {
        Command::Simulate => commands::simulate(cfg, &mut w)?,
        Command::Rates => commands::rates(cfg, &mut w)?,
        Command::Adjoint => commands::adjoint(cfg, &mut w)?,
        Command::SecondAdjoint => commands::second_adjoint(cfg, &mut w)?,
        Command::CheckMp => commands::check_mp_cmd(cfg, &mut w)?,
        Command::Bdg => commands::bdg(cfg, &mut w)?,
        Command::Oracle => commands::oracle(cfg, &mut w)?,
        Command::Accept => unreachable!(),
    };
    Ok(w.finish(ManifestInfo {
        command: command.name().into(),
        config: cfg.to_toml(),
        wall_time_seconds: start.elapsed().as_secs_f64(),
        checks,
    })?)
}
