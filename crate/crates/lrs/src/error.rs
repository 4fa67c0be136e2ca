use thiserror::Error;

#[derive(Debug, Error)]
pub enum LrsError {
    #[error("singular system: {0}")]
    SingularSystem(String),

    #[error("rank-deficient matrix: {0}")]
    RankDeficient(String),

    #[error("degenerate moment matrix: eigengap {gap:.3e} below threshold {threshold:.3e}")]
    DegenerateMoment { gap: f64, threshold: f64 },

    #[error("infeasible sparsity: t*k = {demand} exceeds d*zeta = {capacity}")]
    InfeasibleSparsity { demand: usize, capacity: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("privacy budget mismatch: release {attempted} exceeds the {planned} planned releases")]
    PrivacyBudgetMismatch { planned: usize, attempted: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("format error at {location}: {message}")]
    Format { location: String, message: String },

    #[error("task index {index} out of range for {len} tasks")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl LrsError {
    /// True for failures of the numerical kernels, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            LrsError::SingularSystem(_)
                | LrsError::RankDeficient(_)
                | LrsError::DegenerateMoment { .. }
        )
    }

    pub(crate) fn format(location: impl Into<String>, message: impl Into<String>) -> Self {
        LrsError::Format {
            location: location.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, LrsError>;
