use thiserror::Error;

/// Errors raised by the simulator, the calibrators and the experiment driver.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("pilot matrix is not orthogonal: {0}")]
    InvalidPilot(String),

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("antenna {antenna} has no uplink energy in the dataset")]
    DegenerateAntenna { antenna: usize },

    #[error("calibration is degenerate: {0}")]
    Degenerate(String),

    #[error(
        "normal equations are ill-conditioned (condition estimate {condition:.3e}); \
         {observations} observations for {unknowns} unknowns per column"
    )]
    IllConditioned {
        condition: f64,
        observations: usize,
        unknowns: usize,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl CalibError {
    pub(crate) fn shape(op: &'static str, left: impl ToString, right: impl ToString) -> Self {
        CalibError::Shape {
            op,
            left: left.to_string(),
            right: right.to_string(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        CalibError::InvalidArgument(msg.into())
    }

    /// True for errors caused by user-supplied configuration rather than a failed run.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            CalibError::Parse { .. } | CalibError::Config { .. } | CalibError::InvalidArgument(_)
        )
    }
}

impl From<std::io::Error> for CalibError {
    fn from(e: std::io::Error) -> Self {
        CalibError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CalibError>;
