use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use consistent_feature::autodiff::OpKind;
use consistent_feature::config::{ExperimentKind, RunSpec};
use consistent_feature::error::Error;
use consistent_feature::gradcheck::run_suite;
use consistent_feature::harness::{self, write_atomic, Report};

#[derive(Parser)]
#[command(name = "cf", about = "Feature-consistency regularizer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `run.out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated replicate seeds; overrides `run.seeds`.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured model once per seed.
    Train(RunArgs),
    /// Random-label memorization vs clean-label convergence.
    Memtest(RunArgs),
    /// One-at-a-time hyperparameter grid.
    Sweep(RunArgs),
    /// Baseline, CF and classic regularizers on the same data.
    Compare(RunArgs),
    /// Finite-difference check of every op and a composed model.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Corrupt one op's backward pass (negative control).
        #[arg(long, hide = true)]
        fault: Option<String>,
    },
    /// Plot one metric field from metric CSVs as an SVG line chart.
    Plot {
        #[arg(long)]
        field: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        csvs: Vec<PathBuf>,
    },
    /// Train on the first seed and write eval-mode backbone features.
    ExportFeatures(RunArgs),
}

const EXIT_CONFIG: u8 = 1;
const EXIT_NUMERIC: u8 = 2;
const EXIT_GRADCHECK: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite { .. } => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}

fn load(args: &RunArgs, kind: Option<ExperimentKind>) -> Result<(RunSpec, PathBuf), Error> {
    let mut spec = RunSpec::from_file(&args.config)?;
    if let Some(k) = kind {
        spec.kind = k;
    }
    if let Some(seeds) = &args.seeds {
        spec.seeds = seeds.clone();
    }
    spec.validate()?;
    let out = args
        .out
        .clone()
        .or_else(|| spec.out.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set run.out".into()))?;
    Ok((spec, out))
}

fn run_experiment(args: &RunArgs, kind: Option<ExperimentKind>) -> Result<Report, Error> {
    let (spec, out) = load(args, kind)?;
    match kind {
        Some(ExperimentKind::Train) => harness::run_train(&spec, &out),
        Some(ExperimentKind::Memtest) => harness::run_memtest(&spec, &out),
        Some(ExperimentKind::Sweep) => harness::run_sweep(&spec, &out),
        Some(ExperimentKind::Compare) => harness::run_compare(&spec, &out),
        Some(ExperimentKind::Gradcheck) => unreachable!("handled separately"),
        None => harness::run_export(&spec, &out),
    }
}

fn gradcheck(config: Option<&Path>, out: Option<&Path>, fault: Option<&str>) -> Result<bool, Error> {
    if let Some(c) = config {
        RunSpec::from_file(c)?;
    }
    let fault = fault
        .map(|name| OpKind::from_name(name).ok_or_else(|| Error::Config(format!("unknown op {name:?}"))))
        .transpose()?;
    let report = run_suite(fault)?;
    let text = report.render();
    print!("{text}");
    if let Some(dir) = out {
        write_atomic(&dir.join("gradcheck.txt"), text.as_bytes())?;
    }
    Ok(report.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => run_experiment(a, Some(ExperimentKind::Train)),
        Command::Memtest(a) => run_experiment(a, Some(ExperimentKind::Memtest)),
        Command::Sweep(a) => run_experiment(a, Some(ExperimentKind::Sweep)),
        Command::Compare(a) => run_experiment(a, Some(ExperimentKind::Compare)),
        Command::ExportFeatures(a) => run_experiment(a, None),
        Command::Plot { field, out, csvs } => harness::emit_plot(csvs, field, out).map(|()| Report {
            files: vec![out.clone()],
            summary: String::new(),
        }),
        Command::Gradcheck { config, out, fault } => {
            return match gradcheck(config.as_deref(), out.as_deref(), fault.as_deref()) {
                Ok(true) => ExitCode::SUCCESS,
                Ok(false) => ExitCode::from(EXIT_GRADCHECK),
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(exit_code(&e))
                }
            };
        }
    };
    match result {
        Ok(report) => {
            for f in &report.files {
                println!("wrote {}", f.display());
            }
            if !report.summary.is_empty() {
                println!("{}", report.summary);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
