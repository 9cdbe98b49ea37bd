use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use smoothdiff::experiment::{cli_run, cli_verify, presets, ExperimentConfig, ExperimentError, VerifyKind};

#[derive(Parser)]
#[command(name = "smoothdiff", version, about = "Regularized diffusion simulator")]
struct Cli {
    /// Number of worker threads (defaults to all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Base seed; replaces `algorithm.seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        /// Experiment config (TOML).
        config: PathBuf,
        /// `key=value` override; may be repeated.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Check an analytical bound empirically.
    Verify {
        /// Which bound to check.
        kind: VerifyKind,
        /// Experiment config (TOML).
        config: PathBuf,
        /// `key=value` override; may be repeated.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Write a builtin config to a directory.
    Preset {
        /// Preset name.
        name: String,
        /// Directory receiving `<name>.toml`.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn load(path: &Path, overrides: &[String], seed: Option<u64>) -> Result<ExperimentConfig, ExperimentError> {
    let mut all = overrides.to_vec();
    if let Some(seed) = seed {
        all.push(format!("algorithm.seed={seed}"));
    }
    ExperimentConfig::load(path, &all)
}

fn execute(cli: Cli) -> Result<bool, ExperimentError> {
    match cli.command {
        Command::Run { config, overrides } => {
            let config = load(&config, &overrides, cli.seed)?;
            let (_, lines) = cli_run(&config, cli.workers)?;
            for line in lines {
                println!("{line}");
            }
            Ok(true)
        }
        Command::Verify { kind, config, overrides } => {
            let config = load(&config, &overrides, cli.seed)?;
            let report = cli_verify(&config, kind, cli.workers)?;
            for criterion in &report.criteria {
                println!("{}", criterion.line());
            }
            Ok(report.all_passed())
        }
        Command::Preset { name, out } => {
            let text = presets::preset(&name).ok_or_else(|| ExperimentError::UnknownPreset(name.clone()))?;
            std::fs::create_dir_all(&out)?;
            let path = out.join(format!("{name}.toml"));
            std::fs::write(&path, text)?;
            println!("{}", path.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(ExperimentError::UnknownPreset(name)) => {
            eprintln!("error: unknown preset `{name}`; available: {}", presets::names().join(", "));
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
