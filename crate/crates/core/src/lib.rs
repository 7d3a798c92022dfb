//! Domain-aware physical memory allocation with Rowhammer guard rows.
//!
//! Memory is reserved in chunks of consecutive (logical) global rows. A
//! domain's chunks form zones fronted by guard rows, and small domains share
//! striped zonelet chunks where every data row is flanked by guards. The
//! crate also carries the comparison allocators, a workload generator and
//! replayer, overhead metrics, and an independent adjacency checker.

pub mod alloc;
pub mod buddy;
pub mod config;
pub mod dram;
pub mod error;
pub mod metrics;
pub mod modes;
pub mod types;
pub mod verifier;
pub mod workload;

pub use error::{Error, Result};
pub use types::{DomainId, PageBlock, Pfn};
