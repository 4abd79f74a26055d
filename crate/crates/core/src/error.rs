use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum RomError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("requested rank {requested} exceeds numerical rank {rank} of the snapshot matrix")]
    RankDeficient { requested: usize, rank: usize },

    #[error(
        "data matrix is rank deficient (condition estimate of DᵀD {condition:.3e}); \
         use a positive regularization λ"
    )]
    IllConditioned { condition: f64 },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("degenerate range for variable `{name}` (max = min = {value})")]
    DegenerateRange { name: String, value: f64 },

    #[error("full-order solve failed at t = {time:.6e}: {reason}")]
    BlowUp { time: f64, reason: String },

    #[error("fixed-point update undefined for row {row}: posterior mean is zero")]
    ZeroMean { row: usize },

    #[error("every regularization candidate produced an unstable ROM; tried {tried:?}")]
    AllUnstable { tried: Vec<Vec<f64>> },

    #[error("no stable ensemble members out of {total} draws")]
    NoStableMembers { total: usize },

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl RomError {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            RomError::RankDeficient { .. }
                | RomError::IllConditioned { .. }
                | RomError::NotPositiveDefinite(_)
                | RomError::BlowUp { .. }
                | RomError::ZeroMean { .. }
                | RomError::AllUnstable { .. }
                | RomError::NoStableMembers { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, RomError>;
