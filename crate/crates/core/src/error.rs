use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("invalid preference weight: {0}")]
    InvalidWeight(String),

    #[error("environment episode already finished at step {step}")]
    EpisodeDone { step: usize },

    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("budget too small: {0}")]
    BudgetTooSmall(String),

    #[error("cost matrix is not square ({rows}x{cols})")]
    NonSquare { rows: usize, cols: usize },

    #[error("reference point {reference:?} is not dominated by front point {point:?}")]
    ReferenceNotDominated { reference: Vec<f64>, point: Vec<f64> },

    #[error("archive is empty")]
    EmptyArchive,

    #[error("direction matrix is rank deficient (expected rank {expected})")]
    DegenerateDirections { expected: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn malformed(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Malformed {
            what,
            detail: detail.into(),
        }
    }

    /// Whether this error is numerical (divergence, failed assertion) as
    /// opposed to a usage or configuration problem.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Divergence(_) | Error::DegenerateDirections { .. }
        )
    }
}

pub(crate) fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::LengthMismatch { expected, found })
    }
}
