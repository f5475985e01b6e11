//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform for a primitive. Fatal configuration
    /// error; both shapes are carried in the message.
    #[error("shape mismatch in {op}: left {left:?} vs right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// `backward` called on a non-scalar value.
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    /// `backward` called twice on one tape.
    #[error("backward already ran on this tape; rebuild the tape per forward pass")]
    TapeConsumed,

    /// Sequence plus cache would exceed the model's maximum context.
    #[error("context overflow: {requested} positions exceed max_seq_len {max_seq_len}")]
    ContextOverflow {
        requested: usize,
        max_seq_len: usize,
    },

    /// CTC target cannot be produced by any length-L alignment.
    #[error("infeasible CTC target: min alignment length {min_len} exceeds {slots} slots")]
    InfeasibleTarget { min_len: usize, slots: usize },

    /// Brute-force enumeration guard tripped.
    #[error("enumeration too large: {paths} alignments exceeds guard of {guard}")]
    EnumerationTooLarge { paths: u128, guard: u128 },

    /// Collapsed prefix has zero probability under the slot distributions.
    #[error("zero-probability collapsed prefix; caller should fall back to a base-only step")]
    ZeroProbabilityPrefix,

    /// Metric undefined on these inputs (e.g. zero steps or zero time).
    #[error("undefined metric: {0}")]
    UndefinedMetric(&'static str),

    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("config file error: {0}")]
    ConfigFile(String),

    /// Training aborted on a non-finite loss; the payload names the last
    /// epoch whose checkpoint was kept.
    #[error("non-finite loss at step {step}; keeping checkpoint from epoch {last_good_epoch}")]
    NonFiniteLoss { step: usize, last_good_epoch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
