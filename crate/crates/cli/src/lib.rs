//! The `bos` command line: argument types, the command runner and the
//! tabular file formats shared between commands.

mod commands;
mod tables;

use std::path::{Path, PathBuf};

use bos_core::baselines::Aggregation;
use bos_core::matching::{MeasureKind, PairScore, StabilityOptions};
use bos_core::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

pub use commands::{execute, Outcome};
pub use tables::{MapRow, ScoreRow, ScoreTable};

/// Everything one invocation needs.
#[derive(Debug, Clone, Parser)]
#[command(
    name = "bos",
    version,
    about = "Box stability scoring and label-free mAP estimation"
)]
pub struct RunConfig {
    /// Directory for output artifacts.
    #[arg(long, global = true, env = "BOS_OUT_DIR", default_value = ".")]
    pub out_dir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Check manifests and their dumps against the schema. Writes validation.json.
    Validate(InputArgs),
    /// Measure each sample set (BoS, CS, PS, ES, AC, ATC, FD). Writes scores.csv.
    Score(ScoreArgs),
    /// Ground-truth mAP, mAP50 and mAP75 of each labeled set. Writes maps.csv.
    Map(MapArgs),
    /// Fit a linear mAP regressor on train-role sets. Writes model.json.
    Fit(FitArgs),
    /// Estimate mAP from scores with a fitted model. Writes predictions.csv.
    Predict(PredictArgs),
    /// Leave-one-source-out evaluation. Writes loo.csv and loo.json.
    Loo(LooArgs),
    /// Generate a synthetic meta-set of manifests and dumps.
    Synth(SynthArgs),
    /// Join scores and maps into plot-ready rows with correlation summaries.
    /// Writes report.csv and report_summary.csv.
    Report(ReportArgs),
    /// Feature statistics of a reference domain, for FD. Writes reference_stats.json.
    Stats(InputArgs),
    /// Pick a confidence threshold by R² against mAP. Writes threshold.json.
    Tune(TuneArgs),
}

#[derive(Debug, Clone, Args)]
pub struct InputArgs {
    /// Manifest files, or directories searched for `*.manifest.json`.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PairScoreArg {
    Iou,
    RescaledGiou,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AggregationArg {
    Pooled,
    PerImage,
}

#[derive(Debug, Clone, Args)]
pub struct StabilityArgs {
    /// JSON file with stability options; the flags below override it.
    #[arg(long)]
    pub options: Option<PathBuf>,
    /// Drop detections scoring below this in both passes [default: 0.3].
    #[arg(long)]
    pub score_threshold: Option<f64>,
    /// Match boxes regardless of class.
    #[arg(long)]
    pub class_agnostic: bool,
    #[arg(long, value_enum)]
    pub pair_score: Option<PairScoreArg>,
    /// Scale image stability by the matched fraction of boxes.
    #[arg(long)]
    pub count_penalty: bool,
}

impl StabilityArgs {
    pub fn resolve(&self) -> Result<StabilityOptions, CliError> {
        let mut opts = match &self.options {
            Some(p) => StabilityOptions::from_json(&read_text(p)?)?,
            None => StabilityOptions::default(),
        };
        if let Some(t) = self.score_threshold {
            opts.score_threshold = t;
        }
        if self.class_agnostic {
            opts.classwise = false;
        }
        if let Some(p) = self.pair_score {
            opts.pair_score = match p {
                PairScoreArg::Iou => PairScore::Iou,
                PairScoreArg::RescaledGiou => PairScore::RescaledGiou,
            };
        }
        if self.count_penalty {
            opts.count_penalty = true;
        }
        opts.validate()?;
        Ok(opts)
    }
}

#[derive(Debug, Clone, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Measures to compute.
    #[arg(long = "kind", value_delimiter = ',', default_value = "bos")]
    pub kinds: Vec<MeasureKind>,
    /// Threshold override as `kind=value`, e.g. `ps=0.9`.
    #[arg(long = "tau", value_parser = parse_tau)]
    pub taus: Vec<(MeasureKind, f64)>,
    #[command(flatten)]
    pub stability: StabilityArgs,
    #[arg(long, value_enum, default_value = "pooled")]
    pub aggregation: AggregationArg,
    /// Reference statistics for FD.
    #[arg(long)]
    pub fd_reference: Option<PathBuf>,
    /// Score a single class.
    #[arg(long)]
    pub class_id: Option<u32>,
    /// Images kept from each test-role set.
    #[arg(long, default_value_t = bos_core::autoeval::DEFAULT_TEST_CAP)]
    pub max_images: usize,
}

#[derive(Debug, Clone, Args)]
pub struct MapArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Evaluate one class: the columns become that class's AP.
    #[arg(long)]
    pub class_id: Option<u32>,
    /// Images kept from each test-role set.
    #[arg(long, default_value_t = bos_core::autoeval::DEFAULT_TEST_CAP)]
    pub max_images: usize,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub maps: PathBuf,
    /// Score columns used as regressors.
    #[arg(long, value_delimiter = ',', default_value = "bos")]
    pub features: Vec<String>,
    #[arg(long, default_value = "map")]
    pub target: String,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub scores: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct LooArgs {
    /// Score files, one per repetition.
    #[arg(long, required = true)]
    pub scores: Vec<PathBuf>,
    #[arg(long)]
    pub maps: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "bos")]
    pub features: Vec<String>,
    #[arg(long, default_value = "map")]
    pub target: String,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// World configuration file; defaults are used when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub sources: Option<usize>,
    #[arg(long)]
    pub sets_per_source: Option<usize>,
    #[arg(long)]
    pub images_per_set: Option<usize>,
    /// Decouple perturbation instability from localization noise.
    #[arg(long)]
    pub uncoupled: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub maps: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TuneArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Measure whose threshold is tuned: ps, es or atc.
    #[arg(long)]
    pub kind: MeasureKind,
    #[arg(long, value_delimiter = ',', required = true)]
    pub candidates: Vec<f64>,
    #[command(flatten)]
    pub stability: StabilityArgs,
    #[arg(long, value_enum, default_value = "pooled")]
    pub aggregation: AggregationArg,
}

impl From<AggregationArg> for Aggregation {
    fn from(a: AggregationArg) -> Self {
        match a {
            AggregationArg::Pooled => Aggregation::PooledBoxes,
            AggregationArg::PerImage => Aggregation::PerImage,
        }
    }
}

fn parse_tau(s: &str) -> Result<(MeasureKind, f64), String> {
    let (k, v) = s.split_once('=').ok_or("expected kind=value")?;
    let kind: MeasureKind = k.parse().map_err(|e: Error| e.to_string())?;
    let value: f64 = v.parse().map_err(|e| format!("{v:?}: {e}"))?;
    Ok((kind, value))
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
}

impl CliError {
    /// 1 for bad input or configuration, 2 for failed computations.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Csv { .. } => 1,
            CliError::Core(e) => match e {
                Error::Io { .. } | Error::DimensionMismatch { .. } => 1,
                e if e.is_validation() => 1,
                _ => 2,
            },
        }
    }

    /// Machine-readable form written to stderr.
    pub fn record(&self) -> ErrorRecord {
        let kind = match self {
            CliError::Usage(_) => "usage",
            CliError::Csv { .. } => "table",
            CliError::Core(e) => match e {
                Error::Io { .. } => "io",
                e if e.is_validation() => "validation",
                _ => "computation",
            },
        };
        let line = match self {
            CliError::Core(e) => e.line(),
            _ => None,
        };
        ErrorRecord {
            kind,
            exit_code: self.exit_code(),
            message: self.to_string(),
            line,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct ErrorRecord {
    pub kind: &'static str,
    pub exit_code: i32,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub line: Option<usize>,
}

pub(crate) fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| {
        CliError::Core(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}
