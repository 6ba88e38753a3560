//! `bcsi gen-data|train|eval|ablate|grad-check`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numerical
//! failure (non-finite loss, failed gradient check).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};

use super::config::TrainConfig;
use super::{gradcheck, run};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "bcsi", version, about = "Semi-supervised 3D segmentation with channel routing and cross-stream interaction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// JSON configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic dataset described by the config.
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        /// Overwrite a non-empty dataset directory.
        #[arg(long)]
        force: bool,
    },
    /// Train for `t_max` steps.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Score a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, alias = "resume")]
        checkpoint: PathBuf,
        /// Directory for metrics.csv / metrics.json; defaults to the checkpoint's.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every ablation cell.
    Ablate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    GradCheck,
}

fn load(c: &ConfigArg) -> Result<TrainConfig> {
    match &c.config {
        Some(p) => TrainConfig::load(p),
        None => {
            let cfg = TrainConfig::default();
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

fn execute(cmd: Command) -> Result<i32> {
    match cmd {
        Command::GenData { config, force } => {
            let cfg = load(&config)?;
            let m = run::gen_data(&cfg, force)?;
            println!(
                "{} cases ({} train, {} test) in {}",
                m.all_ids().len(),
                m.labeled_ids.len() + m.unlabeled_ids.len(),
                m.test_ids.len(),
                cfg.data.dir.display()
            );
        }
        Command::Train { config, resume, out } => {
            let cfg = load(&config)?;
            let o = run::train(&cfg, &out, resume.as_deref())?;
            println!("trained {} steps; final checkpoint {}", o.state.iteration, o.final_checkpoint.display());
        }
        Command::Eval { config, checkpoint, out } => {
            let cfg = load(&config)?;
            let report = run::evaluate(&cfg, &checkpoint)?;
            let dir = out.unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf());
            report.write(&dir)?;
            print!("{}", report.summary());
        }
        Command::Ablate { config, seeds, out } => {
            let cfg = load(&config)?;
            run::ablate(&cfg, &out, seeds)?;
            let path = out.join(run::ABLATION_FILE);
            print!("{}", std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?);
        }
        Command::GradCheck => {
            let report = gradcheck::run_suite()?;
            print!("{}", report.render());
            if !report.passed() {
                return Ok(EXIT_NUMERICAL);
            }
        }
    }
    Ok(EXIT_OK)
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["bcsi"]), EXIT_USAGE);
        assert_eq!(run(["bcsi", "train", "--bogus"]), EXIT_USAGE);
        assert_eq!(run(["bcsi", "--help"]), EXIT_OK);
    }

    #[test]
    fn config_errors_exit_one() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"augment": {"crop_size": [64, 64, 64]}}"#).unwrap();
        let data = dir.path().join("data");
        assert_eq!(run(["bcsi".as_ref(), "gen-data".as_ref(), "--config".as_ref(), p.as_os_str()]), EXIT_USAGE);
        assert!(!data.exists(), "validation must precede any write");
    }
}
