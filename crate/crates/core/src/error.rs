use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("gram matrix has {rank} eigenvalues above tolerance, at most {target} allowed")]
    NotLowRank { rank: usize, target: usize },

    #[error("gram matrix is indefinite (most negative eigenvalue {min_eigenvalue:e})")]
    IndefiniteGram { min_eigenvalue: f64 },

    #[error("expected a unit vector, got norm {norm}")]
    NotUnit { norm: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("no pixel center lies inside the mask radius {radius}")]
    EmptyMask { radius: f64 },

    #[error("active set became singular at step {step} (relative pivot {pivot:e})")]
    NumericalBreakdown { step: usize, pivot: f64 },

    #[error("sparse solution has empty support")]
    EmptySupport,

    #[error("cluster {cluster} has non-positive total weight")]
    ZeroWeightCluster { cluster: usize },

    #[error("exhaustive labeling supports at most 8 components, got {0}")]
    TooManyComponents(usize),

    #[error("multiplicity expansion from {declared} to {full} components is not supported")]
    UnsupportedDeficit { declared: usize, full: usize },

    #[error("projection axes are not orthogonal (|<a,b>| = {dot:e})")]
    NotOrthogonal { dot: f64 },

    #[error("stacked regression has rank {rank}, need {needed}")]
    RankDeficient { rank: usize, needed: usize },

    #[error("profiles are defined on different pixel grids")]
    GridMismatch,

    #[error("mixtures have different component counts ({0} vs {1})")]
    ComponentMismatch(usize, usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::NotLowRank { .. }
            | Error::IndefiniteGram { .. }
            | Error::NumericalBreakdown { .. }
            | Error::RankDeficient { .. } => 4,
            _ => 3,
        }
    }
}
