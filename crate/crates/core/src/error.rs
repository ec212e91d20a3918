use thiserror::Error;
use vinlab_tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("could not generate a valid {m}x{n} map after {attempts} attempts (seed {seed})")]
    MapGeneration {
        m: usize,
        n: usize,
        attempts: usize,
        seed: u64,
    },
    #[error("start {0:?} cannot reach the goal")]
    Unreachable((usize, usize)),
    #[error("start {0:?} is the goal")]
    StartIsGoal((usize, usize)),
    #[error("state {0:?} is an obstacle")]
    ObstacleState((usize, usize)),
    #[error("malformed {what} file: {reason}")]
    Format { what: &'static str, reason: String },
    #[error("non-finite loss at epoch {epoch}, batch {batch} (max |grad| {max_grad})")]
    NonFiniteLoss { epoch: usize, batch: usize, max_grad: f64 },
    #[error("gradient check failed: max relative error {error:e} >= {tol:e}")]
    GradCheck { error: f64, tol: f64 },
    #[error("{0}")]
    Empty(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn format(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            what,
            reason: reason.into(),
        }
    }
}
