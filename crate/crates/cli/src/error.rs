use std::path::{Path, PathBuf};
use std::process::ExitCode;

use thiserror::Error;

use crossmag::bench::BenchError;
use crossmag::data::DataError;
use crossmag::distill::DistillError;
use crossmag::eval::EvalError;
use crossmag::mil::MilError;
use crossmag::weights::WeightsError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing prerequisite {}: {hint}", artifact.display())]
    Missing { artifact: PathBuf, hint: String },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Config(_) => 2,
            CliError::Missing { .. } => 3,
            CliError::Invariant(_) => 4,
            CliError::Other(_) => 1,
        })
    }

    pub fn missing(artifact: &Path, hint: &str) -> Self {
        CliError::Missing { artifact: artifact.to_path_buf(), hint: hint.into() }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Other(format!("{}: {e}", path.display()))
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::MissingFile(ref p) => CliError::missing(p, "referenced by data/manifest.jsonl; rerun synth"),
            DataError::Dimensions { .. } | DataError::Classes(_) => CliError::Config(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<DistillError> for CliError {
    fn from(e: DistillError) -> Self {
        match e {
            DistillError::Config(_) => CliError::Config(e.to_string()),
            DistillError::NonFiniteLoss { .. } | DistillError::DegenerateNorm(_) => CliError::Invariant(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<MilError> for CliError {
    fn from(e: MilError) -> Self {
        match e {
            MilError::Config(_) | MilError::TooFewSlides { .. } => CliError::Config(e.to_string()),
            MilError::MissingTile { source: DataError::MissingFile(ref p), .. } => {
                CliError::missing(p, "tile listed in data/manifest.jsonl; rerun synth")
            }
            MilError::NonFinite { .. } | MilError::ActivationBudget { .. } => CliError::Invariant(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Mismatch { .. } | BenchError::Busy => CliError::Invariant(e.to_string()),
            BenchError::UnknownReference(_) | BenchError::NonPositive { .. } | BenchError::TooFewPatches { .. } => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<WeightsError> for CliError {
    fn from(e: WeightsError) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<crossmag::encoder::EncoderError> for CliError {
    fn from(e: crossmag::encoder::EncoderError) -> Self {
        CliError::Config(e.to_string())
    }
}
