mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

/// Fit, evaluate and sample mixtures of continuous-time hidden Markov models.
///
/// Structured output goes to `--out` (or stdout); human-readable summaries go
/// to stderr.
#[derive(Parser, Debug)]
#[command(name = "cthmm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    settings: Settings,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a mixture to a cohort and save the model.
    Fit {
        #[arg(long)]
        data: PathBuf,
        /// Where to write the fitted model.
        #[arg(long)]
        model: PathBuf,
        /// Optional JSON file for fit diagnostics.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Ground-truth sidecar from `simulate`; prints label recovery.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Assign each patient of a cohort to a subtype.
    Assign {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score prefix-conditioned forecasts of each patient's tail.
    Forecast {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit every (subtypes, states) pair and compare forecast error.
    Grid {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample a synthetic cohort and its ground-truth sidecar.
    Simulate {
        /// Where to write the cohort.
        #[arg(long)]
        out: PathBuf,
        /// Ground-truth path; defaults to `<out>.truth.csv`.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Generating model; a built-in demo mixture when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Progression table per subtype: state durations and expected values.
    Report {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Overrides applied on top of the config file.
#[derive(Args, Debug, Default)]
pub struct Settings {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Subtype count, or a comma-separated list for `grid`.
    #[arg(long, global = true, value_delimiter = ',')]
    subtypes: Option<Vec<usize>>,
    /// State count, or a comma-separated list for `grid`.
    #[arg(long, global = true, value_delimiter = ',')]
    states: Option<Vec<usize>>,
    #[arg(long, global = true)]
    train_fraction: Option<f64>,
    #[arg(long, global = true)]
    prefix_fraction: Option<f64>,
    /// Feature subset: what `fit` models and what `grid` evaluates.
    #[arg(long, global = true, value_delimiter = ',')]
    features: Option<Vec<String>>,
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    left_to_right: Option<bool>,
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    terminal_intervention: Option<bool>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let text = e.to_string();
            let detail: Vec<&str> = text
                .lines()
                .take_while(|l| !l.starts_with("Usage:"))
                .map(|l| l.trim().trim_start_matches("error: "))
                .filter(|l| !l.is_empty() && !l.starts_with("For more information"))
                .collect();
            eprintln!("error: UsageError: {}", detail.join(" "));
            return ExitCode::from(2);
        }
    };
    match commands::run(cli.command, &cli.settings) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let detail = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {detail}", e.class());
            ExitCode::FAILURE
        }
    }
}
