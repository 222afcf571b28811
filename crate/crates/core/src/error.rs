use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{name} out of range: {value}")]
    OutOfRange { name: String, value: f64 },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("unknown curve field `{0}`")]
    UnknownCurve(String),
    #[error("submit queue full (capacity {0})")]
    QueueFull(usize),
    #[error("schedule step count mismatch: slot has {slot}, target has {target}")]
    StepMismatch { slot: usize, target: usize },
    #[error("timesteps must decrease: {t_curr} -> {t_next}")]
    TimestepOrder { t_curr: f64, t_next: f64 },
    #[error("source latent required when the SDE curve is below 1")]
    MissingSource,
    #[error("x0 target required when x0_target_strength is set")]
    MissingTarget,
    #[error("no negative velocity available for guidance")]
    MissingNegative,
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn out_of_range(name: impl Into<String>, value: f64) -> Error {
    Error::OutOfRange {
        name: name.into(),
        value,
    }
}
