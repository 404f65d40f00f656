use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at row {row}, column \"{column}\": {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("no observations in {0}")]
    NoObservations(String),

    #[error("duplicate id \"{0}\"")]
    DuplicateId(String),

    #[error("unknown id \"{0}\"")]
    UnknownId(String),

    #[error("no labeled observations")]
    NoLabeled,

    #[error("invalid label \"{value}\" for id \"{id}\": {reason}")]
    InvalidLabel {
        id: String,
        value: String,
        reason: String,
    },

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("link/task mismatch: {0}")]
    LinkTaskMismatch(String),

    #[error(
        "interaction {interaction} requires main effect {missing} when hierarchy is enabled \
         (an interaction alone is not identifiable against its constituent views)"
    )]
    Hierarchy { interaction: String, missing: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not symmetric (max asymmetry {0:.3e})")]
    Asymmetric(f64),

    #[error("negative weight {weight} between {src} and {dst}")]
    NegativeWeight {
        src: String,
        dst: String,
        weight: f64,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("node {0} has zero degree")]
    ZeroDegree(usize),

    #[error(
        "not a transductive smoother: spectral radius of the unlabeled block is {rho:.6} (>= 1); \
         consider shortest_path_complete so every unlabeled node reaches a label"
    )]
    NotTransductive { rho: f64 },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("saturated smoother: {0}")]
    Saturated(String),

    #[error("collinear labeled features")]
    Collinear,

    #[error("no valid candidate: {0}")]
    NoValidCandidate(String),

    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
