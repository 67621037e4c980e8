use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("{system}: expected {expected}, got {got}")]
    Shape {
        system: &'static str,
        expected: String,
        got: String,
    },

    #[error("operation not supported for {0}")]
    Unsupported(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(
        "rejection sampling gave up after {tries} proposals (acceptance rate {acceptance:.3e})"
    )]
    RejectionExhausted { tries: usize, acceptance: f64 },

    #[error("cannot rescale an all-zero momentum vector to a nonzero target")]
    ZeroMomentum,

    #[error("inertia tensor is singular (eigenvalue ratio {ratio:.3e})")]
    SingularInertia { ratio: f64 },

    #[error("timestep {dt} outside of trained range [0, {dt_max}]")]
    TimestepOutOfRange { dt: f64, dt_max: f64 },

    #[error("empty batch")]
    EmptyBatch,

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("mismatched inputs: {0}")]
    Mismatch(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
