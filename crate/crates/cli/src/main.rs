use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use hetfactor_cli::output::{OutputDir, Report};
use hetfactor_cli::{commands, Result, Settings};

/// Time-varying covariance estimation with heteroscedastic factor models.
///
/// Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
#[derive(Parser)]
#[command(name = "hetfactor", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML file with any of the settings below; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long, short, default_value = ".")]
    out: PathBuf,
    #[command(flatten)]
    settings: Settings,
}

#[derive(Args)]
struct DataArgs {
    /// Input CSV
    #[arg(long, short)]
    data: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct FittedArgs {
    /// A `model.json` written by `fit` or `select`
    #[arg(long)]
    fitted: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a data set from the heteroscedastic simulation design
    Simulate(Common),
    /// Fit one model
    Fit(DataArgs),
    /// Choose K by cross-validation and refit on all data
    Select(DataArgs),
    /// Rotate a fitted factor model toward sparse loadings
    Identify(FittedArgs),
    /// One-step-ahead predictive scores over a test range
    Forecast(DataArgs),
    /// Cosine similarities between rows of the (time-varying) loadings
    Similarity(FittedArgs),
    /// Average KL divergence from the simulation truth for several models
    KlCompare(Common),
}

fn run(cli: Cli) -> Result<()> {
    let started = Instant::now();
    let (name, common) = match &cli.command {
        Command::Simulate(c) => ("simulate", c),
        Command::Fit(a) => ("fit", &a.common),
        Command::Select(a) => ("select", &a.common),
        Command::Identify(a) => ("identify", &a.common),
        Command::Forecast(a) => ("forecast", &a.common),
        Command::Similarity(a) => ("similarity", &a.common),
        Command::KlCompare(c) => ("kl-compare", c),
    };
    let file = match &common.config {
        Some(p) => Settings::from_file(p)?,
        None => Settings::default(),
    };
    let cfg = file.overlay(common.settings.clone()).resolve()?;
    let mut out = OutputDir::create(&common.out)?;
    let mut report = Report::new(name, &cfg);
    match &cli.command {
        Command::Simulate(_) => commands::simulate_cmd(&cfg, &mut out, &mut report)?,
        Command::Fit(a) => commands::fit(&cfg, &a.data, &mut out, &mut report)?,
        Command::Select(a) => commands::select(&cfg, &a.data, &mut out, &mut report)?,
        Command::Identify(a) => commands::identify_cmd(&cfg, &a.fitted, &mut out, &mut report)?,
        Command::Forecast(a) => commands::forecast(&cfg, &a.data, &mut out, &mut report)?,
        Command::Similarity(a) => commands::similarity(&cfg, &a.fitted, &mut out, &mut report)?,
        Command::KlCompare(_) => commands::kl_compare(&cfg, &mut out, &mut report)?,
    }
    report.finish(&mut out, started.elapsed().as_secs_f64())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hetfactor: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
