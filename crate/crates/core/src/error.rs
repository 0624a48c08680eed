use std::path::PathBuf;

use crate::data_model::{Modality, Violation};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("clip {clip}: missing file {path}")]
    MissingFile { clip: String, path: PathBuf },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("clip {clip}: dimension mismatch ({detail})")]
    DimMismatch { clip: String, detail: String },
    #[error("clip {clip}: {}", join_violations(.violations))]
    InvariantViolation {
        clip: String,
        violations: Vec<Violation>,
    },
    #[error("majority vote needs an odd number of annotators, got {0}")]
    EvenAnnotatorCount(usize),
    #[error("expected {expected} features, got {found}")]
    WrongModality { expected: Modality, found: Modality },
    #[error("{0} sequence has no timesteps")]
    EmptySequence(Modality),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite attention logit")]
    NonFiniteLogit,
    #[error("row {row} is all zeros and cannot be normalized")]
    ZeroVector { row: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("F1 undefined: no positives in predictions or gold labels")]
    NoPositivesAnywhere,
    #[error("average precision undefined: no positive gold labels")]
    NoPositives,
    #[error("kappa undefined: chance agreement is 1 but observed agreement is below 1")]
    DegenerateMarginals,
    #[error("clip {0} has no labels")]
    NoLabels(String),
    #[error("{0} partition is empty")]
    EmptyPartition(&'static str),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("mask must leave at least one modality visible")]
    AllMasked,
    #[error("mask set is empty")]
    EmptyMask,
    #[error("no fully aligned samples left in the batch")]
    EmptyAlignedSubset,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("JSON error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// True for errors caused by bad input data or configuration rather than
    /// a failure while running.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::MissingFile { .. }
                | Error::SchemaMismatch(_)
                | Error::DimMismatch { .. }
                | Error::InvariantViolation { .. }
                | Error::EvenAnnotatorCount(_)
                | Error::NoLabels(_)
                | Error::EmptyPartition(_)
                | Error::AllMasked
                | Error::EmptyMask
                | Error::Config(_)
                | Error::Json { .. }
                | Error::Checkpoint(_)
                | Error::Io { .. }
        )
    }
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}
