use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A malformed architecture description, with the 1-based line it came from.
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    /// A layer whose derived dimensions are invalid (layer numbers are 1-based).
    #[error("layer {layer}: {message}")]
    Shape { layer: usize, message: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("index {index} out of range 1..={len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("data: {0}")]
    Data(String),

    #[error("line search failed: step {alpha:e} fell below floor {floor:e} (f = {f:e}, g'd = {slope:e})")]
    LineSearchFailed {
        alpha: f64,
        floor: f64,
        f: f64,
        slope: f64,
    },

    #[error("non-positive curvature p'Ap = {curvature:e} at CG iteration {iteration}")]
    NegativeCurvature { iteration: usize, curvature: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    /// True for failures of the optimization itself rather than of inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::LineSearchFailed { .. } | Error::NegativeCurvature { .. } | Error::Numerical(_)
        )
    }
}
