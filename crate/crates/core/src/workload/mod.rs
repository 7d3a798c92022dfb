//! Allocation traces: format, synthetic mixes, and replay.

pub mod mix;
pub mod replay;
pub mod trace;

pub use mix::{generate_mix, AppClass, MixSpec};
pub use replay::{replay, ReplayConfig, ReplayOutcome};
pub use trace::{parse_trace, write_trace, Action, TraceEvent};
