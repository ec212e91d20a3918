use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: kernel extents must be odd, got {kh}x{kw}")]
    EvenKernel { op: &'static str, kh: usize, kw: usize },
    #[error("channel_max: input has no channels")]
    EmptyChannels,
    #[error("{op}: empty spatial extent")]
    EmptySpatial { op: &'static str },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{op}: cell ({i}, {j}) outside {m}x{n} grid")]
    IndexOutOfRange {
        op: &'static str,
        i: usize,
        j: usize,
        m: usize,
        n: usize,
    },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
}
