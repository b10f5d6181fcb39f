//! Baseline reclamation schemes sharing the node pool.

pub mod ebr;
pub mod hp;
pub mod nr;

pub use ebr::{EbrDomain, EbrThread};
pub use hp::{HpDomain, HpThread};
pub use nr::NoReclaim;

/// How long HP and EBR keep scanning or advancing on an empty pool before
/// reporting exhaustion. Time-bounded so a descheduled peer on a loaded
/// machine is not mistaken for a permanently stuck one.
pub(crate) const ALLOC_PATIENCE: std::time::Duration = std::time::Duration::from_millis(250);
