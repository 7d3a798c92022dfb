use crate::types::{DomainId, Pfn};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration for `{field}`: {reason}")]
    Config { field: &'static str, reason: String },

    #[error("invalid address transform: {0}")]
    Transform(String),

    #[error("{what} {value} out of range (limit {limit})")]
    OutOfRange {
        what: &'static str,
        value: u64,
        limit: u64,
    },

    #[error("out of memory serving {pages} page(s) for domain {domain}")]
    OutOfMemory { domain: DomainId, pages: u64 },

    #[error("order {order} cannot be served (max {max})")]
    OrderTooLarge { order: u32, max: u32 },

    #[error("unknown domain {0}")]
    UnknownDomain(DomainId),

    #[error("domain {domain} still owns {live_pages} page(s)")]
    DomainInUse { domain: DomainId, live_pages: u64 },

    #[error("page {pfn} is not allocated to domain {domain}: {reason}")]
    Ownership {
        pfn: Pfn,
        domain: DomainId,
        reason: &'static str,
    },

    #[error("zonelets are disabled in this allocator mode")]
    ZoneletsDisabled,

    #[error("page index {index} of chunk {chunk} is a guard position")]
    GuardPosition { chunk: u32, index: u32 },

    #[error("trace line {line}: {reason}")]
    Trace { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Config {
            field,
            reason: reason.into(),
        }
    }
}
