//! Trace-driven container partitioning and slimming.
//!
//! Given system-call logs from model runs of a container plus a
//! partitioning policy, this crate computes per-executable resource sets,
//! partitions the executables under user constraints, plans which files
//! each output container receives (exclusive, duplicated read-only, or
//! shared volume), and materializes slimmed per-container file trees with
//! manifests and an orchestration descriptor.
//!
//! Pipeline: [`trace`] parses logs, [`effects`] folds them into read/write
//! resource sets, [`attribution`] credits resources to executables and
//! builds the executable-level call graph, [`partition`] computes the
//! constrained partition, [`placement`] plans resource placement, and
//! [`emit`] writes the output trees.

pub mod analysis;
pub mod attribution;
pub mod bytes;
pub mod effects;
pub mod emit;
pub mod partition;
pub mod placement;
pub mod policy;
pub mod trace;

pub use bytes::{AbsPath, ByteStr};
