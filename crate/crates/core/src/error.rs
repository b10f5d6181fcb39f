use thiserror::Error;

/// Errors surfaced by the arena, the runtime and the benchmark harness.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error("arena capacity must be at least 1")]
    ZeroCapacity,

    #[error("invalid node layout: {0}")]
    InvalidLayout(String),

    #[error("node pool exhausted ({capacity} nodes): reclamation freed nothing")]
    Exhausted { capacity: usize },

    #[error("an operation is already in progress on this thread")]
    NestedOperation,

    #[error("operation declares {0} reference slots, at most 7 are supported")]
    TooManyRefs(usize),

    #[error("thread registry is full ({0} threads)")]
    RegistryFull(usize),

    #[error("too many arenas registered with one runtime")]
    TooManyArenas,

    #[error("operation exceeded its step budget")]
    StepBudget,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown output format `{0}`")]
    UnknownFormat(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
