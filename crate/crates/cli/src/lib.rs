//! The `bayesfit` command-line tool.
//!
//! Subcommands follow the estimator workflow: `split` a CSV into train and
//! test files, `fit` a model and write its artifacts, `score` and `predict`
//! with a saved model file, and `diagnose` a saved fit.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | usage error (bad flags or options) |
//! | 2 | data error (unreadable or invalid CSV contents) |
//! | 3 | inference failure (divergence, failed factorization, undefined score) |
//! | 4 | I/O or model-file error |
//!
//! Diagnostics go to standard error; numbers and tables go to standard output
//! or to files.

pub mod data;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use bayesfit::advi::AdviConfig;
use bayesfit::diagnostics::{
    export_elbo, export_trace, format_float, summarize_trace, summarize_variational, summary_csv,
    write_summary_csv, DiagnosticsError, PosteriorSummary,
};
use bayesfit::models::{
    Engine, Estimator, FittedArtifact, GPRegressorSpec, GaussianProcessRegressor, LinearRegression,
    LinearRegressionSpec, ModelsError, NoisePrior,
};
use bayesfit::nuts::NutsConfig;
use clap::{Args, Parser, Subcommand, ValueEnum};

pub use data::{load_csv, read_table, split_indices, train_test_split, write_table, Dataset, Split, Table};

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "BAYESFIT_OUTPUT_DIR";
/// Output directory used when neither `--out` nor the environment sets one.
pub const DEFAULT_OUTPUT_DIR: &str = "bayesfit-out";

pub const MODEL_FILE: &str = "model.bml";
pub const ELBO_FILE: &str = "elbo.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const TRAIN_FILE: &str = "train.csv";
pub const TEST_FILE: &str = "test.csv";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Inference(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Inference(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<ModelsError> for CliError {
    fn from(e: ModelsError) -> Self {
        let msg = e.to_string();
        match e {
            ModelsError::Usage(_) | ModelsError::NotFitted | ModelsError::Distribution(_) => CliError::Usage(msg),
            ModelsError::Data(_) => CliError::Data(msg),
            ModelsError::UndefinedScore
            | ModelsError::Prediction(_)
            | ModelsError::Advi(_)
            | ModelsError::Nuts(_)
            | ModelsError::Model(_) => CliError::Inference(msg),
            ModelsError::Persist(_) => CliError::Io(msg),
        }
    }
}

impl From<DiagnosticsError> for CliError {
    fn from(e: DiagnosticsError) -> Self {
        let msg = e.to_string();
        match e {
            DiagnosticsError::Io { .. } | DiagnosticsError::Parse { .. } => CliError::Io(msg),
            _ => CliError::Inference(msg),
        }
    }
}

/// Parsed command line.
#[derive(Debug, Parser)]
#[command(name = "bayesfit", version, about = "Bayesian regression on CSV data")]
pub struct RunConfig {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model and write model.bml, summary.csv and engine diagnostics.
    Fit(FitArgs),
    /// Split a CSV into train.csv and test.csv.
    Split(SplitArgs),
    /// Print the R² of a saved model on a CSV.
    Score(ScoreArgs),
    /// Write posterior-predictive means and sds for a CSV.
    Predict(PredictArgs),
    /// Rewrite the summary and diagnostics of a saved model.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelChoice {
    Linear,
    Gp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EngineChoice {
    Advi,
    Nuts,
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Output directory [default: $BAYESFIT_OUTPUT_DIR or bayesfit-out]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl OutputArgs {
    pub fn dir(&self) -> PathBuf {
        resolve_output_dir(self.out.as_deref(), std::env::var_os(OUTPUT_DIR_ENV))
    }
}

/// `--out` wins, then the environment, then [`DEFAULT_OUTPUT_DIR`].
pub fn resolve_output_dir(flag: Option<&Path>, env: Option<OsString>) -> PathBuf {
    match (flag, env) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(e)) if !e.is_empty() => PathBuf::from(e),
        _ => PathBuf::from(DEFAULT_OUTPUT_DIR),
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long, value_enum, default_value = "linear")]
    pub model: ModelChoice,
    #[arg(long, value_enum, default_value = "advi")]
    pub engine: EngineChoice,
    /// Training CSV with a header row.
    #[arg(long)]
    pub data: PathBuf,
    /// Name of the target column.
    #[arg(long)]
    pub target: String,
    #[command(flatten)]
    pub output: OutputArgs,
    /// Hold out this fraction of rows and print the test R².
    #[arg(long, default_value_t = 0.0)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Pin the noise sd (standardized target units) instead of inferring it.
    #[arg(long)]
    pub noise_sd: Option<f64>,
    /// Posterior draws used for the summary of a variational fit.
    #[arg(long, default_value_t = 4000)]
    pub summary_draws: usize,
    /// Also write SVG plots next to the CSV exports.
    #[arg(long)]
    pub plots: bool,
    #[command(flatten)]
    pub advi: AdviArgs,
    #[command(flatten)]
    pub nuts: NutsArgs,
}

#[derive(Debug, Args)]
pub struct AdviArgs {
    #[arg(long, default_value_t = 10_000)]
    pub steps: usize,
    /// Monte Carlo draws per gradient estimate.
    #[arg(long, default_value_t = 1)]
    pub n_mc: usize,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, default_value_t = 0.01)]
    pub learning_rate: f64,
}

#[derive(Debug, Args)]
pub struct NutsArgs {
    #[arg(long, default_value_t = 4)]
    pub chains: usize,
    #[arg(long, default_value_t = 1000)]
    pub draws: usize,
    #[arg(long, default_value_t = 1000)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0.8)]
    pub target_accept: f64,
    #[arg(long, default_value_t = 10)]
    pub max_depth: usize,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Model file written by `fit`.
    #[arg(long)]
    pub model_file: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub target: String,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model_file: PathBuf,
    /// CSV holding the model's feature columns; other columns are ignored.
    #[arg(long)]
    pub data: PathBuf,
    /// Write the predictions here instead of standard output.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub model_file: PathBuf,
    #[command(flatten)]
    pub output: OutputArgs,
    #[arg(long, default_value_t = 4000)]
    pub summary_draws: usize,
    #[arg(long)]
    pub plots: bool,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn main_with_args<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let config = match RunConfig::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let sink: &mut dyn Write = if e.use_stderr() { stderr } else { stdout };
            let _ = sink.write_all(text.as_bytes());
            return code;
        }
    };
    match run(&config, stdout, stderr) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(config: &RunConfig, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), CliError> {
    match &config.command {
        Command::Fit(a) => fit(a, stdout, stderr),
        Command::Split(a) => split(a, stderr),
        Command::Score(a) => score(a, stdout),
        Command::Predict(a) => predict(a, stdout),
        Command::Diagnose(a) => diagnose(a, stdout, stderr),
    }
}

fn out_error(e: std::io::Error) -> CliError {
    CliError::Io(format!("writing output: {e}"))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn engine(a: &FitArgs) -> Engine {
    match a.engine {
        EngineChoice::Advi => Engine::Advi(AdviConfig {
            steps: a.advi.steps,
            n_mc: a.advi.n_mc,
            batch_size: a.advi.batch_size,
            learning_rate: a.advi.learning_rate,
            seed: a.seed,
            ..AdviConfig::default()
        }),
        EngineChoice::Nuts => Engine::Nuts(NutsConfig {
            chains: a.nuts.chains,
            draws: a.nuts.draws,
            warmup: a.nuts.warmup,
            target_accept: a.nuts.target_accept,
            max_depth: a.nuts.max_depth,
            seed: a.seed,
            ..NutsConfig::default()
        }),
    }
}

fn fit(a: &FitArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), CliError> {
    let out = a.output.dir();
    let table = read_table(&a.data)?;
    let (train, test) = split_indices(table.rows.len(), a.test_fraction, a.seed)?;
    let test_set = if test.is_empty() {
        None
    } else {
        create_dir(&out)?;
        let (train_t, test_t) = (table.select(&train), table.select(&test));
        write_table(&train_t, &out.join(TRAIN_FILE))?;
        write_table(&test_t, &out.join(TEST_FILE))?;
        Some((train_t, test_t))
    };
    let train_data = match &test_set {
        Some((t, _)) => t.dataset(&a.target)?,
        None => table.dataset(&a.target)?,
    };
    let noise = a.noise_sd.map(|sigma| NoisePrior::Fixed { sigma });
    let engine = engine(a);
    let estimator = match a.model {
        ModelChoice::Linear => {
            let mut spec = LinearRegressionSpec::default();
            if let Some(n) = noise {
                spec.noise = n;
            }
            let mut m = LinearRegression::new(spec).with_feature_names(train_data.feature_names.clone());
            m.fit(&train_data.x, &train_data.y, &engine)?;
            Estimator::Linear(m)
        }
        ModelChoice::Gp => {
            let mut spec = GPRegressorSpec::default();
            if let Some(n) = noise {
                spec.noise = n;
            }
            let mut m = GaussianProcessRegressor::new(spec).with_feature_names(train_data.feature_names.clone());
            m.fit(&train_data.x, &train_data.y, &engine)?;
            Estimator::Gp(m)
        }
    };
    let test_score = match &test_set {
        Some((_, test_t)) => {
            let d = test_t.dataset(&a.target)?;
            Some(estimator.score(&d.x, &d.y)?)
        }
        None => None,
    };
    create_dir(&out)?;
    estimator.save(&out.join(MODEL_FILE))?;
    write_diagnostics(&estimator, &out, a.summary_draws, a.plots, stderr)?;
    if let Some(s) = test_score {
        writeln!(stdout, "{}", format_float(s)).map_err(out_error)?;
    }
    let _ = writeln!(stderr, "wrote {}", out.join(MODEL_FILE).display());
    Ok(())
}

/// Posterior summary of a fitted estimator on the constrained scale.
pub fn summarize(estimator: &Estimator, summary_draws: usize) -> Result<PosteriorSummary, CliError> {
    let state = estimator.state().ok_or(ModelsError::NotFitted)?;
    let summary = match &state.artifact {
        FittedArtifact::Variational { posterior, .. } => {
            summarize_variational(posterior, &estimator.layout()?, summary_draws, state.seed)?
        }
        FittedArtifact::Trace(t) => summarize_trace(t)?,
    };
    Ok(summary)
}

fn write_diagnostics(
    estimator: &Estimator,
    out: &Path,
    summary_draws: usize,
    plots: bool,
    stderr: &mut dyn Write,
) -> Result<PosteriorSummary, CliError> {
    let state = estimator.state().ok_or(ModelsError::NotFitted)?;
    let summary = summarize(estimator, summary_draws)?;
    write_summary_csv(&summary, &out.join(SUMMARY_FILE))?;
    match &state.artifact {
        FittedArtifact::Variational { history, .. } => export_elbo(history, &out.join(ELBO_FILE), plots)?,
        FittedArtifact::Trace(t) => {
            export_trace(t, out, plots)?;
            for w in &t.warnings {
                let _ = writeln!(stderr, "warning: {w}");
            }
            for row in &summary.rows {
                if row.rhat.is_some_and(|r| r > 1.01) {
                    let _ = writeln!(stderr, "warning: {} has R-hat {:.3}", row.name, row.rhat.unwrap());
                }
            }
        }
    }
    Ok(summary)
}

fn split(a: &SplitArgs, stderr: &mut dyn Write) -> Result<(), CliError> {
    let table = read_table(&a.data)?;
    let (train, test) = split_indices(table.rows.len(), a.test_fraction, a.seed)?;
    let out = a.output.dir();
    create_dir(&out)?;
    write_table(&table.select(&train), &out.join(TRAIN_FILE))?;
    write_table(&table.select(&test), &out.join(TEST_FILE))?;
    let _ = writeln!(stderr, "{} train rows, {} test rows in {}", train.len(), test.len(), out.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<Estimator, CliError> {
    Ok(Estimator::load(path)?)
}

fn feature_names(e: &Estimator) -> Result<Vec<String>, CliError> {
    Ok(e.state().ok_or(ModelsError::NotFitted)?.feature_names.clone())
}

fn score(a: &ScoreArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let estimator = load_model(&a.model_file)?;
    let table = read_table(&a.data)?;
    let x = table.features(&feature_names(&estimator)?)?;
    let y = table.dataset(&a.target)?.y;
    let s = estimator.score(&x, &y)?;
    writeln!(stdout, "{}", format_float(s)).map_err(out_error)
}

fn predict(a: &PredictArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let estimator = load_model(&a.model_file)?;
    let table = read_table(&a.data)?;
    let x = table.features(&feature_names(&estimator)?)?;
    let (mean, sd) = estimator.predict_with_std(&x)?;
    let result = Table {
        header: vec!["mean".into(), "sd".into()],
        rows: mean.into_iter().zip(sd).map(|(m, s)| vec![m, s]).collect(),
    };
    match &a.output {
        Some(path) => write_table(&result, path),
        None => {
            let mut text = String::from("mean,sd\n");
            for r in &result.rows {
                text += &format!("{},{}\n", format_float(r[0]), format_float(r[1]));
            }
            stdout.write_all(text.as_bytes()).map_err(out_error)
        }
    }
}

fn diagnose(a: &DiagnoseArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), CliError> {
    let estimator = load_model(&a.model_file)?;
    let out = a.output.dir();
    create_dir(&out)?;
    let summary = write_diagnostics(&estimator, &out, a.summary_draws, a.plots, stderr)?;
    stdout.write_all(summary_csv(&summary).as_bytes()).map_err(out_error)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_dir_precedence() {
        let env = Some(OsString::from("from-env"));
        assert_eq!(resolve_output_dir(Some(Path::new("flag")), env.clone()), PathBuf::from("flag"));
        assert_eq!(resolve_output_dir(None, env), PathBuf::from("from-env"));
        assert_eq!(resolve_output_dir(None, Some(OsString::new())), PathBuf::from(DEFAULT_OUTPUT_DIR));
        assert_eq!(resolve_output_dir(None, None), PathBuf::from(DEFAULT_OUTPUT_DIR));
    }

    #[test]
    fn missing_target_is_a_usage_error() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = main_with_args(["bayesfit", "fit", "--data", "d.csv"], &mut out, &mut err);
        assert_eq!(code, 1);
        assert!(String::from_utf8(err).unwrap().contains("--target"));
        assert!(out.is_empty());
    }

    #[test]
    fn unknown_flag_is_a_usage_error() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        assert_eq!(main_with_args(["bayesfit", "score", "--bogus"], &mut out, &mut err), 1);
        assert!(!err.is_empty());
    }

    #[test]
    fn help_goes_to_stdout() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        assert_eq!(main_with_args(["bayesfit", "--help"], &mut out, &mut err), 0);
        assert!(String::from_utf8(out).unwrap().contains("fit"));
        assert!(err.is_empty());
    }
}
