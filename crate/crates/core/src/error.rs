use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty interval [{lo}, {hi}]")]
    EmptyInterval { lo: f64, hi: f64 },

    #[error("matrix is not a rigid transform: {0}")]
    NotRigid(String),

    #[error("point cloud has zero spatial extent")]
    ZeroScale,

    #[error("requested {requested} samples from a cloud of {available} points")]
    SampleTooLarge { requested: usize, available: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("unknown {what}: {name}")]
    Unknown { what: &'static str, name: String },

    #[error("no correspondences survived the trim filter at iteration {iteration}")]
    AssociationEmpty { iteration: usize },

    #[error("degenerate geometry at iteration {iteration}: condition number {condition:e}")]
    DegenerateGeometry { iteration: usize, condition: f64 },

    #[error("ICP did not converge within {iterations} iterations")]
    NotConverged { iterations: usize },

    #[error("every sample was dropped")]
    AllSamplesDropped,

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.into(),
        }
    }

    /// Re-tag a solver error with the ICP iteration it occurred in.
    pub fn at_iteration(self, iteration: usize) -> Self {
        match self {
            Error::AssociationEmpty { .. } => Error::AssociationEmpty { iteration },
            Error::DegenerateGeometry { condition, .. } => Error::DegenerateGeometry {
                iteration,
                condition,
            },
            other => other,
        }
    }

    /// True for failures of the numerics (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::AssociationEmpty { .. }
                | Error::DegenerateGeometry { .. }
                | Error::NotConverged { .. }
                | Error::AllSamplesDropped
                | Error::ZeroScale
        )
    }
}
