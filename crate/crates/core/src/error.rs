use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, TaqError>;

#[derive(Debug, Error)]
pub enum TaqError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("eigensolver did not converge (off-diagonal norm {off_norm:e})")]
    ConvergenceError { off_norm: f64 },

    #[error("corrupt codes: {0}")]
    CorruptCodes(String),

    #[error("model too small: {n_layers} layers, need at least {min}")]
    ModelTooSmall { n_layers: usize, min: usize },

    #[error("budget infeasible: plan cost {cost} exceeds budget {budget}{}", min_gamma.map(|g| format!(" (minimal feasible gamma {g:e})")).unwrap_or_default())]
    BudgetInfeasible {
        cost: u64,
        budget: u64,
        min_gamma: Option<f64>,
    },

    #[error("exhaustive search too large: {0} candidate plans")]
    OracleTooLarge(u128),

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("training diverged at step {step}")]
    TrainingDiverged { step: usize },

    #[error("evaluation failed at layer {layer}: {source}")]
    LayerEval {
        layer: usize,
        #[source]
        source: Box<TaqError>,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl TaqError {
    /// Process exit status for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            TaqError::InvalidConfig(_) => 2,
            TaqError::BudgetInfeasible { .. } => 3,
            TaqError::ConvergenceError { .. } | TaqError::TrainingDiverged { .. } => 4,
            TaqError::LayerEval { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}
