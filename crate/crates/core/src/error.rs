use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid trajectory {id}: {reason}")]
    InvalidTrajectory { id: String, reason: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("innovation covariance is not positive definite at padded step {step}")]
    NonSpdInnovation { step: usize },

    #[error("k-means produced an empty cluster after {attempts} attempts")]
    DegenerateClustering { attempts: usize },

    #[error("all hypothesis weights underflowed for trajectory {trajectory}")]
    WeightUnderflow { trajectory: String },

    #[error("dynamics normal matrix is singular for agent {agent}")]
    SingularDynamics { agent: usize },

    #[error("agent {agent} received no responsibility mass")]
    StarvedAgent { agent: usize },

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("trajectory {id} has {len} points, at least {needed} required")]
    TooShort { id: String, len: usize, needed: usize },

    #[error("{0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Stable machine-readable category, used by the CLI for error reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidTrajectory { .. } | Error::TooShort { .. } | Error::EmptyCorpus(_) => {
                "input"
            }
            Error::InvalidConfig(_) => "config",
            Error::InvalidModel(_) => "model",
            Error::NonSpdInnovation { .. }
            | Error::DegenerateClustering { .. }
            | Error::WeightUnderflow { .. }
            | Error::SingularDynamics { .. }
            | Error::StarvedAgent { .. } => "numerical",
            Error::Format(_) | Error::Csv(_) | Error::Json(_) => "format",
            Error::Io(_) | Error::Image(_) => "io",
        }
    }
}
