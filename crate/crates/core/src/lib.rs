//! Lock-free memory reclamation with restartable read-only periods.
//!
//! Threads run operations through a [`ThreadHandle`]. Reads are certified
//! against a per-thread dirty flag; writes happen inside short write-only
//! periods whose references are published in the thread's record. When the
//! node pool runs dry a reclamation phase signals every thread, traces from
//! the published references and the registered global roots, and sweeps
//! unmarked nodes back onto the free list.
//!
//! Hazard pointers, epoch-based reclamation and a leaky baseline share the
//! same [`Arena`] so the lock-free sets in [`sets`] can run under each.

pub mod arena;
pub mod error;
pub mod harness;
pub mod runtime;
pub mod schemes;
pub mod sets;
pub mod tracer;
pub mod verify;

pub use arena::{Arena, MarkTable, NodeLayout, NodeRef, RootCell, NULL, POISON, WORD};
pub use error::{Error, Result};
pub use runtime::{
    Abort, CounterSnapshot, Faults, Hook, HookPoint, Instrumentation, Label, OpSpec, Restart, Runtime,
    RuntimeConfig, ThreadHandle, ThreadRecord, LOCALS, MARKER, SLOTS,
};
pub use schemes::{EbrDomain, EbrThread, HpDomain, HpThread, NoReclaim};
pub use sets::{Access, EbrAccess, FaAccess, HashSet, HpAccess, ListSet, NrAccess, Scheme, Variant};
pub use tracer::{clear_tag, is_tagged, TAG};
