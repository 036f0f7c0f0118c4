use thiserror::Error;

use crate::score::Region;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid note: {0}")]
    InvalidNote(String),

    #[error("{region} note {index}: {reason}")]
    InvalidNoteAt { region: Region, index: usize, reason: String },

    #[error("{region} start out of range [{lo},{hi}]: note {index} has start {start}", lo = region.bounds().0, hi = region.bounds().1)]
    RegionOutOfRange { region: Region, index: usize, start: i64 },

    #[error("malformed document: {0}")]
    Malformed(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("midi parse error at byte {offset}: {message}")]
    Midi { offset: usize, message: String },

    #[error("token {index}: id {id} is outside the vocabulary")]
    TokenOutOfRange { index: usize, id: u32 },

    #[error("token {index}: {token} is not allowed after {after}")]
    Ungrammatical { index: usize, token: String, after: String },

    #[error("note {index} starts at step {start}, beyond the {n_bars}-bar window")]
    NoteBeyondWindow { index: usize, start: u32, n_bars: u32 },

    #[error("grammar dead end: no legal next token")]
    GrammarDeadEnd,

    #[error("weight container error at byte {offset}: {message}")]
    Container { offset: usize, message: String },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("unexpected tensor `{0}`")]
    UnexpectedTensor(String),

    #[error("duplicate tensor `{0}`")]
    DuplicateTensor(String),

    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },

    #[error("tensor `{0}` contains non-finite values")]
    NonFinite(String),

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("every target is padding; loss is undefined")]
    AllPadding,

    #[error("non-finite gradient in `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("no training data")]
    NoTrainingData,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
