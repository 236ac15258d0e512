use thiserror::Error;

use crate::surrogate::SurrogateNet;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("non-finite numeric input: {0}")]
    NumericInput(String),

    #[error("integration blew up at step {step} (t = {time} s): |y| exceeded {guard:e}")]
    Stiffness { step: usize, time: f64, guard: f64 },

    #[error("signal evaluated outside its domain: t = {0}")]
    Domain(f64),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("division guard: {0}")]
    ZeroReference(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("training diverged at epoch {epoch} (loss = {loss})")]
    TrainingDivergence {
        epoch: usize,
        loss: f64,
        /// Network state after the last epoch whose loss was finite and bounded.
        checkpoint: Box<SurrogateNet>,
    },

    #[error("rollout produced a non-finite state at step {step}")]
    RolloutBlowUp { step: usize },

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    /// Short machine-readable tag, used when a failed cell is written to a report.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidModel(_) => "invalid_model",
            Error::NumericInput(_) => "numeric_input",
            Error::Stiffness { .. } => "stiffness",
            Error::Domain(_) => "domain",
            Error::Shape(_) => "shape",
            Error::ZeroReference(_) => "zero_reference",
            Error::Usage(_) => "usage",
            Error::TrainingDivergence { .. } => "training_divergence",
            Error::RolloutBlowUp { .. } => "rollout_blow_up",
            Error::Config(_) => "config",
        }
    }
}
