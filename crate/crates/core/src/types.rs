use std::fmt;

use serde::{Deserialize, Serialize};

/// Physical page frame number.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Pfn(pub u64);

impl fmt::Display for Pfn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

/// Security domain handle issued by an allocator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DomainId(pub u32);

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "d{}", self.0)
    }
}

/// A naturally aligned run of `2^order` page frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PageBlock {
    pub start: Pfn,
    pub order: u32,
}

impl PageBlock {
    pub fn len(&self) -> u64 {
        1 << self.order
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn pfns(&self) -> impl Iterator<Item = Pfn> {
        let start = self.start.0;
        (start..start + self.len()).map(Pfn)
    }
}
