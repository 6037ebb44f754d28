use thiserror::Error;

/// Errors raised across the identification pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("unbalanced three-phase sample: |a+b+c| = {sum:.3e} exceeds tolerance {limit:.3e}")]
    Unbalanced { sum: f64, limit: f64 },

    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },

    #[error("singular preview matrix at step {step} (min pivot {pivot:.3e}; R_s={rs}, R_r={rr}, X_l={xl}, X_m={xm})")]
    SingularPreview {
        step: usize,
        pivot: f64,
        rs: f64,
        rr: f64,
        xl: f64,
        xm: f64,
    },

    #[error("startup has not settled after {duration} s (rotor speed still changing by {change:.2}% in the final window); use a longer duration")]
    NotSettled { duration: f64, change: f64 },

    #[error("dataset format error at line {line}: {msg}")]
    Format { line: usize, msg: String },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate validation data: measured signal has zero energy")]
    ZeroEnergy,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for failures caused by numerical blow-up rather than bad inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::SingularPreview { .. } | Error::NotSettled { .. }
        )
    }
}
