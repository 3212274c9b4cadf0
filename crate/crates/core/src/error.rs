use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// The pool cannot produce the requested chunks even after reclaiming
    /// everything the tensor arena may give back.
    #[error("capacity exhausted: need {needed} chunk(s), {obtainable} obtainable")]
    CapacityExhausted { needed: usize, obtainable: usize },
    #[error("out of memory: {0}")]
    OutOfMemory(String),
    #[error("invalid release of chunk {chunk}: {live} live slot(s)")]
    InvalidRelease { chunk: usize, live: usize },
    #[error("invalid handle {0}")]
    InvalidHandle(u64),
    #[error("fit failed at {context}: {reason}")]
    Fit { context: String, reason: String },
}
