use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use scalelaw::cli::{self, Exit};
use scalelaw::config::{ConfigError, RunConfig, SweepBlock};

#[derive(Parser)]
#[command(name = "scalelaw", version, about = "Mean-field solvers and simulator for random-feature regression dynamics")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured solver (sweeping if the config has a [sweep] block).
    Run {
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Sweep one parameter over a list of values.
    Sweep {
        config: PathBuf,
        /// One of N, P, B, E, eta, a, b. Defaults to the config's [sweep] block.
        #[arg(short, long)]
        parameter: Option<String>,
        #[arg(short, long, value_delimiter = ',', num_args = 0..)]
        values: Option<Vec<f64>>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Parse and check a config without running it.
    Validate { config: PathBuf },
}

fn load(path: &Path, output: Option<PathBuf>) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::from_path(path)?;
    if let Some(o) = output {
        cfg.output = o;
    }
    Ok(cfg)
}

fn execute(command: Command) -> Result<Exit, ConfigError> {
    match command {
        Command::Validate { config } => {
            let cfg = load(&config, None)?;
            let spec = cfg.build_spectrum()?;
            cfg.build_shape(spec.modes())?;
            cfg.sweep_plan()?;
            println!("{}: ok ({} solver, {} modes)", config.display(), cfg.solver, spec.modes());
            Ok(Exit::Success)
        }
        Command::Run { config, output } => finish(load(&config, output)?),
        Command::Sweep {
            config,
            parameter,
            values,
            output,
        } => {
            let mut cfg = load(&config, output)?;
            let base = cfg.sweep.take();
            let sweep = match (parameter, values, base) {
                (Some(p), Some(v), _) => SweepBlock { parameter: p, values: v },
                (Some(p), None, _) => SweepBlock {
                    parameter: p,
                    values: Vec::new(),
                },
                (None, Some(v), Some(b)) => SweepBlock {
                    parameter: b.parameter,
                    values: v,
                },
                (None, None, Some(b)) => b,
                (None, _, None) => return Err(ConfigError::Invalid("no sweep parameter given".into())),
            };
            cfg.sweep = Some(sweep);
            cfg.validate()?;
            finish(cfg)
        }
    }
}

fn finish(cfg: RunConfig) -> Result<Exit, ConfigError> {
    let threads = cli::threads_from_env()?;
    let manifest = cli::run(&cfg, threads)?;
    for cell in &manifest.cells {
        if let Some(msg) = &cell.message {
            eprintln!("{}: {msg}", cell.label);
        }
    }
    eprintln!(
        "wrote {} files to {} ({:.2} s)",
        manifest.outputs.len() + 1,
        cfg.output.display(),
        manifest.wall_time_s
    );
    Ok(manifest.exit())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match execute(args.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(Exit::ConfigError as u8)
        }
    }
}
