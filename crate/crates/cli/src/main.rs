use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use adaptqa_cli::commands::{cmd_count, cmd_generate_data, cmd_gradcheck, cmd_plotdata, cmd_run};
use adaptqa_cli::manifest::{self, Manifest};
use adaptqa_cli::{CliError, Result};
use adaptqa_core::autograd::gradcheck::DEFAULT_TOLERANCE;
use clap::{Args, Parser, Subcommand};

/// Parameter-efficient span QA experiments: counting, training, gradient checks.
#[derive(Parser)]
#[command(name = "adaptqa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment manifest (INI, one section per experiment).
    #[arg(long, visible_alias = "config")]
    manifest: Option<PathBuf>,
    /// Output directory; defaults to the manifest's `out_dir`, then `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides every experiment's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the trainable-parameter table and write count.csv.
    Count(Common),
    /// Train and evaluate every experiment; writes report.csv and loss curves.
    Run {
        #[command(flatten)]
        common: Common,
        /// Run experiments concurrently (timings are then not comparable).
        #[arg(long)]
        parallel: bool,
    },
    /// Finite-difference check of every op and the full model composites.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of consecutive seeds to try.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
        /// Adds a check with a deliberately wrong backward rule.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Turn report CSVs into (x, F1) CSVs for plotting.
    Plotdata {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Write each experiment's training and held-out datasets.
    GenerateData(Common),
}

const DEFAULT_OUT: &str = "out";

fn load(common: &Common, required: bool) -> Result<(Manifest, PathBuf)> {
    let manifest = match &common.manifest {
        Some(path) => manifest::load(path)?,
        None if required => return Err(CliError::Validation("--manifest is required".into())),
        None => manifest::parse("[default]\n")?,
    };
    let manifest = match common.seed {
        Some(seed) => manifest.with_seed(seed),
        None => manifest,
    };
    let out = common
        .out
        .clone()
        .or_else(|| manifest.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    Ok((manifest, out))
}

fn dispatch(cli: Cli) -> Result<()> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Count(common) => {
            let (m, dir) = load(&common, true)?;
            cmd_count(&m, &dir, &mut out)?;
        }
        Command::Run { common, parallel } => {
            let (m, dir) = load(&common, true)?;
            cmd_run(&m, &dir, parallel, &mut out)?;
        }
        Command::Gradcheck {
            seed,
            seeds,
            tolerance,
            inject_fault,
        } => {
            cmd_gradcheck(seed, seeds, tolerance, inject_fault, &mut out)?;
        }
        Command::Plotdata { reports, out: dir } => {
            cmd_plotdata(&reports, &dir, &mut out)?;
        }
        Command::GenerateData(common) => {
            let (m, dir) = load(&common, false)?;
            cmd_generate_data(&m, &dir, &mut out)?;
        }
    }
    out.flush().map_err(|e| CliError::io("stdout", e))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
