//! Command-line flags and the optional TOML config file.
//!
//! Every flag is optional at the clap level so that a value given on the
//! command line can be told apart from one given in the config file. Flags
//! win over the file; the file wins over built-in defaults.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "reftrack", version, about = "Referring multi-object tracking on RGB + thermal video")]
pub struct Cli {
    /// Seed for every random draw of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML file with defaults for any flag.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Where result files and reports go.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true)]
    pub log_level: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Track every expression of a dataset and write MOT result files.
    Track(TrackArgs),
    /// Score result files against dataset ground truth.
    Eval(EvalArgs),
    /// Compute rewards for model completions.
    Reward(RewardArgs),
    /// Run the toy policy-optimisation demo and stability checks.
    GspoDemo(GspoDemoArgs),
    /// Write a synthetic sequence.
    Synth(SynthArgs),
    /// Report how completions parse.
    Parse(ParseArgs),
}

/// Copies every unset field of `$flags` from `$file`.
macro_rules! overlay {
    ($flags:expr, $file:expr; $($field:ident),* $(,)?) => {
        $( if $flags.$field.is_none() { $flags.$field = $file.$field.take(); } )*
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Oracle,
    Parser,
    Remote,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackArgs {
    /// Sequence directory or directory of sequences.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    /// Only expressions whose text or slug contains this string.
    #[arg(long)]
    pub expression: Option<String>,
    /// Parser backend: completions at `<cache-dir>/<sequence>/<slug>/NNNNNN.txt`.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Remote backend base URL.
    #[arg(long, env = "REFTRACK_ENDPOINT")]
    pub endpoint: Option<String>,
    #[arg(long, env = "REFTRACK_TIMEOUT_MS")]
    pub timeout_ms: Option<u64>,
    #[arg(long)]
    pub retries: Option<u32>,
    #[arg(long)]
    pub tau_iou: Option<f64>,
    #[arg(long)]
    pub delta_max: Option<u32>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub emit_temporary: Option<bool>,
    #[arg(long)]
    pub min_hits: Option<u32>,
    #[arg(long)]
    pub p_miss: Option<f64>,
    #[arg(long)]
    pub jitter_sigma: Option<f64>,
    #[arg(long)]
    pub scale_sigma: Option<f64>,
    #[arg(long)]
    pub fp_rate: Option<f64>,
    /// Largest tolerated fraction of frames with a backend failure.
    #[arg(long)]
    pub max_failure_rate: Option<f64>,
}

impl TrackArgs {
    fn overlay(&mut self, mut file: Self) {
        overlay!(self, file; dataset, backend, expression, cache_dir, endpoint, timeout_ms, retries, tau_iou,
            delta_max, emit_temporary, min_hits, p_miss, jitter_sigma, scale_sigma, fp_rate, max_failure_rate);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationArg {
    Micro,
    Macro,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalArgs {
    /// Result files at `<predictions>/<sequence>/<slug>.txt`.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Also print one row per expression.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub per_expression: Option<bool>,
    #[arg(long, value_enum)]
    pub aggregation: Option<AggregationArg>,
}

impl EvalArgs {
    fn overlay(&mut self, mut file: Self) {
        overlay!(self, file; predictions, dataset, per_expression, aggregation);
    }
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardArgs {
    /// JSON lines: `{"sequence", "frame", "completion"}` plus optional
    /// `expression`, `length`, `model_width`, `model_height`.
    #[arg(long)]
    pub completions: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Training progress in [0, 1].
    #[arg(long)]
    pub phase: Option<f64>,
    #[arg(long)]
    pub tau_match: Option<f64>,
    #[arg(long)]
    pub phase_switch: Option<f64>,
    /// Full reward parameter set (config file only).
    #[arg(skip)]
    pub params: Option<reftrack_core::RewardConfig>,
}

impl RewardArgs {
    fn overlay(&mut self, mut file: Self) {
        overlay!(self, file; completions, dataset, phase, tau_match, phase_switch, params);
    }
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GspoDemoArgs {
    #[arg(long)]
    pub group_size: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub beta_kl: Option<f64>,
    #[arg(long)]
    pub scale_max: Option<f64>,
    /// Plain standardisation instead of clipped advantage scaling.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub no_cas: Option<bool>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub inner_steps: Option<usize>,
    /// Reward spread of the near-degenerate probe group.
    #[arg(long)]
    pub inject_sigma: Option<f64>,
    #[arg(long)]
    pub gradient_checks: Option<usize>,
}

impl GspoDemoArgs {
    fn overlay(&mut self, mut file: Self) {
        overlay!(self, file; group_size, epsilon, beta_kl, scale_max, no_cas, steps, vocab, max_len, learning_rate,
            inner_steps, inject_sigma, gradient_checks);
    }
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthArgs {
    /// Target directory; defaults to `<output-dir>/<name>`.
    #[arg(long)]
    pub dest: Option<PathBuf>,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub targets: Option<u32>,
    #[arg(long)]
    pub frames: Option<u32>,
    #[arg(long)]
    pub width: Option<u32>,
    #[arg(long)]
    pub height: Option<u32>,
    #[arg(long)]
    pub speed_min: Option<f64>,
    #[arg(long)]
    pub speed_max: Option<f64>,
    #[arg(long)]
    pub size_min: Option<f64>,
    #[arg(long)]
    pub size_max: Option<f64>,
}

impl SynthArgs {
    fn overlay(&mut self, mut file: Self) {
        overlay!(self, file; dest, name, targets, frames, width, height, speed_min, speed_max, size_min, size_max);
    }
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParseArgs {
    /// Text file with one completion per line, or `.jsonl` with a string or
    /// `{"completion": ...}` per line.
    #[arg(value_name = "FILE")]
    pub file: Option<PathBuf>,
    /// Treat the whole file as a single completion.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub whole: Option<bool>,
}

impl ParseArgs {
    fn overlay(&mut self, mut file: Self) {
        overlay!(self, file; file, whole);
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    output_dir: Option<PathBuf>,
    log_level: Option<String>,
    track: Option<TrackArgs>,
    eval: Option<EvalArgs>,
    reward: Option<RewardArgs>,
    gspo_demo: Option<GspoDemoArgs>,
    synth: Option<SynthArgs>,
    parse: Option<ParseArgs>,
}

/// Settings shared by every subcommand after merging.
#[derive(Debug, Clone)]
pub struct Globals {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub log_level: log::LevelFilter,
}

fn read_config(path: &Path) -> Result<FileConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
}

/// Applies the config file (if any) underneath the flags.
pub fn resolve(mut cli: Cli) -> Result<(Globals, Command), CliError> {
    let mut file = match &cli.config {
        Some(path) => read_config(path)?,
        None => FileConfig::default(),
    };
    match &mut cli.command {
        Command::Track(a) => a.overlay(file.track.take().unwrap_or_default()),
        Command::Eval(a) => a.overlay(file.eval.take().unwrap_or_default()),
        Command::Reward(a) => a.overlay(file.reward.take().unwrap_or_default()),
        Command::GspoDemo(a) => a.overlay(file.gspo_demo.take().unwrap_or_default()),
        Command::Synth(a) => a.overlay(file.synth.take().unwrap_or_default()),
        Command::Parse(a) => a.overlay(file.parse.take().unwrap_or_default()),
    }
    let level = cli.log_level.or(file.log_level).unwrap_or_else(|| "warn".into());
    let log_level = level
        .parse()
        .map_err(|_| CliError::Usage(format!("unknown log level {level:?}")))?;
    let globals = Globals {
        seed: cli.seed.or(file.seed).unwrap_or(0),
        output_dir: cli.output_dir.or(file.output_dir).unwrap_or_else(|| PathBuf::from("out")),
        log_level,
    };
    Ok((globals, cli.command))
}
