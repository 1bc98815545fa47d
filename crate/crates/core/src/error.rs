//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty distribution")]
    EmptyDistribution,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid partition spec: {0}")]
    InvalidPartitionSpec(String),

    #[error("class uncovered: {clients} clients x {classes_per_client} classes per client < {classes} classes")]
    ClassUncovered {
        clients: usize,
        classes_per_client: usize,
        classes: usize,
    },

    #[error("cannot split {pool} samples across {clients} clients")]
    TooManyClients { clients: usize, pool: usize },

    #[error("class {class} has no samples")]
    EmptyClass { class: usize },

    #[error("global batch size must be at least 1")]
    InvalidBatchSize,

    #[error("client pool is empty")]
    EmptyPool,

    #[error(
        "client depleted: client {client} has {remaining} samples left, {requested} requested"
    )]
    ClientDepleted {
        client: usize,
        requested: usize,
        remaining: usize,
    },

    #[error("invalid bound inputs: {0}")]
    InvalidBoundInputs(String),

    #[error("oracle scale exceeded: C({pool}, {batch}) > {limit}")]
    OracleScaleExceeded {
        pool: usize,
        batch: usize,
        limit: u64,
    },

    #[error("schedule does not match partition: {0}")]
    ScheduleMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("client desync")]
    ClientDesync,

    #[error("no forward pass cached for this step")]
    MissingForward,

    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("unsupported checkpoint version {0}")]
    CheckpointVersion(u32),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("{context}: {source}")]
    Csv {
        context: String,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    pub fn csv(context: impl Into<String>, source: csv::Error) -> Self {
        Error::Csv {
            context: context.into(),
            source,
        }
    }
}
