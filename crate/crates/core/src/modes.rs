//! The compared configurations and a single handle over both allocator
//! families.

use std::sync::Arc;

use crate::alloc::{AllocatorParams, Finding, Mode, PageAllocator, ZoneAllocator};
use crate::buddy::BuddyAllocator;
use crate::dram::transform::GROUP_ROWS;
use crate::dram::Dram;
use crate::error::Result;
use crate::metrics::PageUsage;
use crate::types::{DomainId, PageBlock};

/// Chunk size of the siloz approximation, in global rows.
pub const SILOZ_CHUNK_ROWS: u32 = 512;

/// Parameters for `mode` on this DRAM. In complex addressing the default
/// 16-row chunk is cut to one 8-row logical group.
pub fn make_mode(mode: Mode, dram: &Dram) -> Result<AllocatorParams> {
    let base = AllocatorParams {
        mode,
        ..AllocatorParams::default()
    };
    let chunk_rows = if dram.map().is_complex() {
        GROUP_ROWS
    } else {
        base.chunk_rows
    };
    let p = match mode {
        Mode::Aegis | Mode::Buddy => AllocatorParams { chunk_rows, ..base },
        Mode::Zebram => AllocatorParams {
            chunk_rows,
            n_guard: 2,
            zonelets_enabled: true,
            expansion_enabled: false,
            ..base
        },
        Mode::Siloz => AllocatorParams {
            chunk_rows: SILOZ_CHUNK_ROWS,
            n_guard: 0,
            zonelets_enabled: false,
            ..base
        },
    };
    if mode != Mode::Buddy {
        p.validate(dram)?;
    }
    Ok(p)
}

/// One allocator of any mode.
#[derive(Clone, Debug)]
pub enum Machine {
    Zones(Box<ZoneAllocator>),
    Buddy(BuddyAllocator),
}

impl Machine {
    pub fn new(dram: Arc<Dram>, params: AllocatorParams) -> Result<Self> {
        match params.mode {
            Mode::Buddy => Ok(Machine::Buddy(BuddyAllocator::new(
                dram.geometry().total_pages(),
                params.max_order,
            )?)),
            _ => Ok(Machine::Zones(Box::new(ZoneAllocator::new(dram, params)?))),
        }
    }

    pub fn for_mode(mode: Mode, dram: Arc<Dram>) -> Result<Self> {
        let p = make_mode(mode, &dram)?;
        Machine::new(dram, p)
    }

    pub fn mode(&self) -> Mode {
        match self {
            Machine::Zones(z) => z.params().mode,
            Machine::Buddy(_) => Mode::Buddy,
        }
    }

    pub fn zones(&self) -> Option<&ZoneAllocator> {
        match self {
            Machine::Zones(z) => Some(z),
            Machine::Buddy(_) => None,
        }
    }

    /// Row distance the isolation check uses for this machine: the guard
    /// count it was built with. Buddy promises nothing and is held to the
    /// default blast radius.
    pub fn isolation_radius(&self) -> u32 {
        match self {
            Machine::Zones(z) => z.params().n_guard,
            Machine::Buddy(_) => AllocatorParams::default().n_guard,
        }
    }

    /// Chunk size in logical rows when every chunk is meant to serve a
    /// single domain, i.e. zone modes without zonelets.
    pub fn exclusive_chunk_rows(&self) -> Option<u32> {
        match self {
            Machine::Zones(z) if !z.params().zonelets_enabled => Some(z.params().chunk_rows),
            _ => None,
        }
    }

    /// Bookkeeping self-check of whichever allocator this is.
    pub fn audit(&self) -> Vec<Finding> {
        match self {
            Machine::Zones(z) => z.audit(),
            Machine::Buddy(b) => match b.check() {
                Ok(()) => Vec::new(),
                Err(detail) => vec![Finding {
                    check: "partition",
                    chunk: None,
                    detail,
                }],
            },
        }
    }

    /// Largest number of domains that can hold memory at once.
    pub fn max_domains(&self) -> Option<u64> {
        match self {
            Machine::Zones(z) if !z.params().zonelets_enabled => Some(z.chunk_count() as u64),
            _ => None,
        }
    }
}

impl PageAllocator for Machine {
    fn create_domain(&mut self) -> DomainId {
        match self {
            Machine::Zones(z) => z.create_domain(),
            Machine::Buddy(b) => b.create_domain(),
        }
    }

    fn destroy_domain(&mut self, domain: DomainId) -> Result<()> {
        match self {
            Machine::Zones(z) => z.destroy_domain(domain),
            Machine::Buddy(b) => b.destroy_domain(domain),
        }
    }

    fn alloc_pages(&mut self, domain: DomainId, order: u32) -> Result<PageBlock> {
        match self {
            Machine::Zones(z) => z.alloc_pages(domain, order),
            Machine::Buddy(b) => b.alloc_pages(domain, order),
        }
    }

    fn free_pages(&mut self, domain: DomainId, block: PageBlock) -> Result<u64> {
        match self {
            Machine::Zones(z) => z.free_pages(domain, block),
            Machine::Buddy(b) => b.free_pages(domain, block),
        }
    }

    fn usage(&self) -> PageUsage {
        match self {
            Machine::Zones(z) => z.usage(),
            Machine::Buddy(b) => b.usage(),
        }
    }

    fn total_pages(&self) -> u64 {
        match self {
            Machine::Zones(z) => z.total_pages(),
            Machine::Buddy(b) => b.total_pages(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dram::DramConfig;
    use crate::error::Error;

    fn default_dram() -> Arc<Dram> {
        Arc::new(DramConfig::default().build().unwrap())
    }

    #[test]
    fn siloz_domain_limit() {
        let m = Machine::for_mode(Mode::Siloz, default_dram()).unwrap();
        assert_eq!(m.max_domains(), Some(256));
        assert_eq!(m.isolation_radius(), 0);
    }

    #[test]
    fn zebram_capacity_fraction() {
        let dram = default_dram();
        let p = make_mode(Mode::Zebram, &dram).unwrap();
        let usable = p.zonelets_per_chunk() as f64 / p.chunk_rows as f64;
        assert!(usable <= 1.0 / 3.0);
        assert_eq!(p.n_guard, 2);
    }

    #[test]
    fn aegis_defaults() {
        let p = make_mode(Mode::Aegis, &default_dram()).unwrap();
        assert_eq!(p, AllocatorParams::default());
        let complex = DramConfig::complex().build().unwrap();
        assert_eq!(make_mode(Mode::Aegis, &complex).unwrap().chunk_rows, 8);
        assert_eq!(make_mode(Mode::Siloz, &complex).unwrap().chunk_rows, 512);
    }

    #[test]
    fn zebram_rejects_multi_row_blocks() {
        let mut m = Machine::for_mode(Mode::Zebram, default_dram()).unwrap();
        let d = m.create_domain();
        assert!(m.alloc_pages(d, 8).is_ok());
        assert!(matches!(m.alloc_pages(d, 9), Err(Error::OrderTooLarge { max: 8, .. })));
    }

    #[test]
    fn buddy_machine_reserves_nothing() {
        let mut m = Machine::for_mode(Mode::Buddy, default_dram()).unwrap();
        let d = m.create_domain();
        m.alloc_pages(d, 4).unwrap();
        let u = m.usage();
        assert_eq!((u.allocated, u.loss, u.stranded), (16, 0, 0));
        assert!(m.audit().is_empty());
    }
}
