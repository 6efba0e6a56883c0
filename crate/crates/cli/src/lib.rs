//! Command-line front end: sessionize, split, features, fit, predict,
//! evaluate, report and simulate.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

pub use config::{FileConfig, NumList};

/// Bad invocation: reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(
    name = "hishrink",
    version,
    about = "Hierarchical shrinkage models for session length",
    arg_required_else_help = true
)]
pub struct Cli {
    /// Flat key-value TOML file with defaults for any flag.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cut an event log into sessions.
    Sessionize(SessionizeArgs),
    /// Chronological train/valid/test split of a sessions file.
    Split(SplitArgs),
    /// Write raw feature tables and train-standardized design matrices.
    Features(FeaturesArgs),
    /// Tune on valid, refit on train+valid and save a model file.
    Fit(FitArgs),
    /// Predict session lengths in seconds with a saved model.
    Predict(PredictArgs),
    /// Score a model on the test part against the per-user-mean baseline.
    Evaluate(EvaluateArgs),
    /// Fit and evaluate several families into one comparison table.
    Report(ReportArgs),
    /// Generate synthetic sessions from the generative models.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct SessionizeArgs {
    /// Tab-separated event log.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Timestamp layout: lastfm (ISO-8601) or epoch.
    #[arg(long)]
    pub format: Option<String>,
    #[arg(long)]
    pub gap_seconds: Option<f64>,
    #[arg(long)]
    pub min_session_seconds: Option<f64>,
    /// Output sessions CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Sessions CSV.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Train, valid and test fractions, e.g. 0.8,0.1,0.1.
    #[arg(long)]
    pub fractions: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct FeatureArgs {
    /// Split directory written by `split`.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// CSV of user_id plus categorical attribute columns.
    #[arg(long)]
    pub attributes: Option<PathBuf>,
    /// Comma-separated feature columns.
    #[arg(long)]
    pub columns: Option<String>,
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    #[command(flatten)]
    pub features: FeatureArgs,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ModelArgs {
    /// baseline, model1, ridge, gbt, model2-l1, model2-l2, model2-gbt, model3-l2 or model3-gbt.
    #[arg(long)]
    pub family: Option<String>,
    /// User-effect penalty values (comma-separated).
    #[arg(long)]
    pub lambda: Option<String>,
    /// Link penalty values (comma-separated).
    #[arg(long)]
    pub alpha: Option<String>,
    /// Huber thresholds (comma-separated).
    #[arg(long)]
    pub delta: Option<String>,
    /// Boosting rounds (comma-separated).
    #[arg(long)]
    pub trees: Option<String>,
    /// Tree depths (comma-separated).
    #[arg(long)]
    pub depth: Option<String>,
    /// Boosting learning rates (comma-separated).
    #[arg(long)]
    pub learning_rate: Option<String>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Worker threads for the grid search; 0 uses every core.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Multiply back-transformed predictions by exp(σ₁²/2).
    #[arg(long)]
    pub lognormal: bool,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub features: FeatureArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Output model file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Model file written by `fit`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Which part to predict: train, valid or test.
    #[arg(long)]
    pub part: Option<String>,
    /// Output predictions CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Model file; without it the family is fitted first.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub features: FeatureArgs,
    #[command(flatten)]
    pub fit: ModelArgs,
    /// Output directory for the report.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub features: FeatureArgs,
    /// Comma-separated families to compare.
    #[arg(long)]
    pub families: Option<String>,
    #[command(flatten)]
    pub fit: ModelArgs,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// eq2 (user effects), eq5 (plus covariates) or eq11 (plus corruptions).
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub min_sessions: Option<usize>,
    #[arg(long)]
    pub max_sessions: Option<usize>,
    #[arg(long)]
    pub sigma0: Option<f64>,
    #[arg(long)]
    pub sigma1: Option<f64>,
    /// Covariate coefficients (comma-separated).
    #[arg(long)]
    pub beta: Option<String>,
    #[arg(long)]
    pub corruption_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code: 0 on success, 2 on usage errors, 1 otherwise.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match commands::dispatch(cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                2
            } else {
                1
            }
        }
    }
}
