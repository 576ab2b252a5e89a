use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fmpa_cli::{run_command, CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "fmpa", version, about = "Federated learning model poisoning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment or a sweep grid and write a results bundle.
    Run {
        config: PathBuf,
        /// Output directory (overrides `output.dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seeds (overrides `seeds`).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// `key.path=value`, applied after the profile and file; repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn run(config: &Path, out: Option<PathBuf>, seeds: Option<Vec<u64>>, overrides: &[String]) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(config, overrides)?;
    if let Some(s) = seeds {
        cfg.seeds = s;
        cfg.validate()?;
    }
    let base = config.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let out = out.unwrap_or_else(|| {
        if cfg.output.dir.is_absolute() {
            cfg.output.dir.clone()
        } else {
            base.join(&cfg.output.dir)
        }
    });
    let results = run_command(&cfg, &out, base)?;
    for r in &results {
        println!("{}", r.summary_line());
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, out, seeds, overrides } => run(&config, out, seeds, &overrides),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
