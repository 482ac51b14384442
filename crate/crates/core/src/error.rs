use std::fmt;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Pipeline stage names used to attribute failures in end-to-end runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Frontend,
    Silence,
    Segmentation,
    Clustering,
    Identification,
    Metrics,
    Federated,
    Export,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Frontend => "frontend",
            Stage::Silence => "silence",
            Stage::Segmentation => "segmentation",
            Stage::Clustering => "clustering",
            Stage::Identification => "identification",
            Stage::Metrics => "metrics",
            Stage::Federated => "federated",
            Stage::Export => "export",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed wav: {0}")]
    MalformedWav(String),
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("signal too short: {len} samples, need at least {needed}")]
    SignalTooShort { len: usize, needed: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("too few frames: {got}, need at least {needed}")]
    TooFewFrames { got: usize, needed: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("window too small: {got} rows, need at least {needed}")]
    WindowTooSmall { got: usize, needed: usize },
    #[error("singular covariance matrix")]
    SingularCovariance,
    #[error("no segments to cluster")]
    NoSegments,
    #[error("invalid model architecture: {0}")]
    InvalidArch(String),
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("empty training data")]
    EmptyData,
    #[error("empty segment")]
    EmptySegment,
    #[error("empty cluster")]
    EmptyCluster,
    #[error("embedding set is empty")]
    EmptySet,
    #[error("zero-norm embedding")]
    ZeroNormEmbedding,
    #[error("{clients} clients requested but only {speakers} speakers available")]
    TooManyClients { clients: usize, speakers: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("bad group size {group_size} for {clients} clients")]
    BadGroupSize { group_size: usize, clients: usize },
    #[error("model architecture mismatch")]
    ArchMismatch,
    #[error("input is not sorted")]
    UnsortedInput,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid synthesis spec: {0}")]
    InvalidSpec(String),
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error("malformed rttm line {line}: {reason}")]
    MalformedRttm { line: usize, reason: String },
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv failure: {0}")]
    Csv(#[from] csv::Error),
    #[error("json failure: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn at(self, stage: Stage) -> Error {
        match self {
            e @ Error::Stage { .. } => e,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }

    /// Stage the error was attributed to, if any.
    pub fn stage(&self) -> Option<Stage> {
        match self {
            Error::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}

/// Tags the error of a failed stage with that stage.
pub trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: Stage) -> Result<T> {
        self.map_err(|e| e.at(stage))
    }
}
