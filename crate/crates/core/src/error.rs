use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("filter row {row} has empty support (radius below half the fine spacing)")]
    EmptyFilterSupport { row: usize },

    #[error("non-finite state at t = {time}")]
    NonFinite { time: f64 },

    #[error("maximum number of steps ({steps}) exceeded at t = {time}")]
    MaxSteps { time: f64, steps: usize },

    #[error("training diverged at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("trajectory {index}: {source}")]
    Trajectory {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("all grid points failed for route {0}")]
    RouteFailure(String),

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("malformed file {path}: {message}")]
    Format { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the numerics (blow-up, singular systems) as
    /// opposed to bad input or I/O.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Singular(_)
            | Error::NonFinite { .. }
            | Error::MaxSteps { .. }
            | Error::Diverged { .. }
            | Error::RouteFailure(_)
            | Error::EmptyFilterSupport { .. } => true,
            Error::Trajectory { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    pub(crate) fn dim(context: &'static str, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            found,
        }
    }
}
