//! Neural substrate: matrices, reverse-mode autodiff, transformer stacks,
//! the optimiser and checkpoints.

mod checkpoint;
mod layers;
mod matrix;
mod models;
mod optim;
mod params;
mod tape;

pub use checkpoint::{checkpoint_id, vocab_hash, Checkpoint, Lineage, CHECKPOINT_VERSION};
pub use layers::{positional_encoding, Linear, ModelDims};
pub use matrix::{dot, round_f32, Matrix};
pub use models::{EncodedNodes, Encoder, EncoderModel, Encoding, Pooling, Seq2Seq, Seq2SeqModel};
pub use optim::{Adam, StepReport, TrainStep};
pub use params::{Grads, ParamId, ParamStore};
pub use tape::{NodeId, Tape};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("empty input sequence")]
    EmptyInput,
    #[error("token id {0} out of range for vocabulary of size {1}")]
    TokenOutOfRange(usize, usize),
    #[error("loss must be a 1x1 value, got {0}x{1}")]
    NonScalarLoss(usize, usize),
    #[error("non-finite loss {0}; aborting update")]
    NonFiniteLoss(f64),
    #[error("non-finite gradient; aborting update")]
    NonFiniteGradient,
    #[error("parameters became non-finite after the update")]
    NonFiniteParameters,
    #[error("no forward pass recorded an embedded input")]
    NoForward,
    #[error("backward has not been run on this tape")]
    NoBackward,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint truncated while reading {0}")]
    Truncated(String),
    #[error("corrupt checkpoint header: {0}")]
    CorruptHeader(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint holds a {found} model, expected {expected}")]
    WrongKind { found: String, expected: String },
    #[error("checkpoint layout mismatch: {0}")]
    LayoutMismatch(String),
}
