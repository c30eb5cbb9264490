use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape lies entirely outside the mask frame")]
    ShapeOutOfFrame,
    #[error("contact point ({0:.4}, {1:.4}) lies outside the mask frame")]
    ContactOutOfFrame(f64, f64),
    #[error("degenerate shape: {0}")]
    DegenerateShape(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("no feasible object in the parameter ranges")]
    InfeasibleRanges,
    #[error("matrix is not positive semi-definite even after jitter {jitter:e}")]
    NotPsd { jitter: f64 },
    #[error("conditioning block is singular")]
    SingularBlock,
    #[error("all sample weights are zero")]
    DegenerateWeights,
    #[error("bad network input: {0}")]
    BadInput(String),
    #[error("checkpoint shape mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("empty affordance set")]
    EmptyAffordances,
    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged {
        epoch: usize,
        last_good: Box<crate::nets::Models>,
    },
    #[error("parameter range has zero width")]
    ZeroRange,
    #[error("missing checkpoint for {0}")]
    MissingCheckpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerical pipeline (as opposed to bad configuration or I/O).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPsd { .. }
                | Error::SingularBlock
                | Error::DegenerateWeights
                | Error::TrainingDiverged { .. }
        )
    }
}
