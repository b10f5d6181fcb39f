//! Lock-free integer sets generic over the reclamation scheme.

pub mod access;
pub mod hash;
pub mod list;

pub use access::{Access, EbrAccess, FaAccess, HpAccess, NrAccess, Scheme};
pub use hash::HashSet;
pub use list::{ListSet, Variant};
