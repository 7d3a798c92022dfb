//! Binary buddy allocator over the whole page space. Domains are recorded
//! for the checker but never influence placement.

use std::collections::{BTreeMap, BTreeSet};

use crate::alloc::PageAllocator;
use crate::error::{Error, Result};
use crate::metrics::PageUsage;
use crate::types::{DomainId, PageBlock, Pfn};

#[derive(Clone, Debug)]
pub struct BuddyAllocator {
    total: u64,
    max_order: u32,
    /// free block starts per order
    free: Vec<BTreeSet<u64>>,
    /// live block start -> (order, owner)
    live: BTreeMap<u64, (u32, DomainId)>,
    domains: BTreeMap<DomainId, u64>,
    next_domain: u32,
    allocated: u64,
}

impl BuddyAllocator {
    pub fn new(total_pages: u64, max_order: u32) -> Result<Self> {
        if total_pages == 0 {
            return Err(Error::config("total_pages", "must be positive"));
        }
        if max_order > 20 {
            return Err(Error::config("max_order", "must be at most 20"));
        }
        let mut free = vec![BTreeSet::new(); max_order as usize + 1];
        let mut at = 0u64;
        while at < total_pages {
            let mut k = max_order.min(at.trailing_zeros());
            while at + (1 << k) > total_pages {
                k -= 1;
            }
            free[k as usize].insert(at);
            at += 1 << k;
        }
        Ok(BuddyAllocator {
            total: total_pages,
            max_order,
            free,
            live: BTreeMap::new(),
            domains: BTreeMap::new(),
            next_domain: 0,
            allocated: 0,
        })
    }

    pub fn max_order(&self) -> u32 {
        self.max_order
    }

    /// Free block starts for each order, lowest order first.
    pub fn free_lists(&self) -> Vec<Vec<u64>> {
        self.free.iter().map(|s| s.iter().copied().collect()).collect()
    }

    pub fn owner_of(&self, pfn: Pfn) -> Option<DomainId> {
        let (&start, &(order, d)) = self.live.range(..=pfn.0).next_back()?;
        (pfn.0 < start + (1 << order)).then_some(d)
    }

    pub fn alloc(&mut self, domain: DomainId, order: u32) -> Result<Pfn> {
        if !self.domains.contains_key(&domain) {
            return Err(Error::UnknownDomain(domain));
        }
        if order > self.max_order {
            return Err(Error::OrderTooLarge {
                order,
                max: self.max_order,
            });
        }
        let k = (order..=self.max_order)
            .find(|&k| !self.free[k as usize].is_empty())
            .ok_or(Error::OutOfMemory {
                domain,
                pages: 1 << order,
            })?;
        let start = self.free[k as usize].pop_first().expect("non-empty");
        for j in (order..k).rev() {
            self.free[j as usize].insert(start + (1 << j));
        }
        self.live.insert(start, (order, domain));
        let len = 1u64 << order;
        *self.domains.get_mut(&domain).expect("checked") += len;
        self.allocated += len;
        Ok(Pfn(start))
    }

    pub fn free(&mut self, domain: DomainId, pfn: Pfn, order: u32) -> Result<u64> {
        let err = |reason| Error::Ownership {
            pfn,
            domain,
            reason,
        };
        match self.live.get(&pfn.0) {
            None => return Err(err("no live block starts here")),
            Some(&(o, _)) if o != order => return Err(err("block order mismatch")),
            Some(&(_, d)) if d != domain => return Err(err("block belongs to another domain")),
            Some(_) => {}
        }
        self.live.remove(&pfn.0);
        let len = 1u64 << order;
        *self.domains.get_mut(&domain).expect("owner registered") -= len;
        self.allocated -= len;

        let (mut start, mut k) = (pfn.0, order);
        while k < self.max_order {
            let buddy = start ^ (1 << k);
            if !self.free[k as usize].remove(&buddy) {
                break;
            }
            start = start.min(buddy);
            k += 1;
        }
        self.free[k as usize].insert(start);
        Ok(len)
    }

    /// Partition check: free and live blocks are aligned, disjoint and
    /// cover the page space, and no two free buddies were left unmerged.
    pub fn check(&self) -> std::result::Result<(), String> {
        let mut spans: Vec<(u64, u64)> = Vec::new();
        for (k, set) in self.free.iter().enumerate() {
            for &s in set {
                if s % (1 << k) != 0 {
                    return Err(format!("free block {s:#x} misaligned for order {k}"));
                }
                if k < self.max_order as usize && set.contains(&(s ^ (1 << k))) {
                    return Err(format!("free buddies {s:#x} at order {k} not merged"));
                }
                spans.push((s, 1 << k));
            }
        }
        for (&s, &(k, _)) in &self.live {
            spans.push((s, 1 << k));
        }
        spans.sort_unstable();
        let mut at = 0;
        for (s, len) in spans {
            if s != at {
                return Err(format!("gap or overlap at {at:#x}"));
            }
            at = s + len;
        }
        if at != self.total {
            return Err(format!("blocks cover {at} of {} pages", self.total));
        }
        Ok(())
    }
}

impl PageAllocator for BuddyAllocator {
    fn create_domain(&mut self) -> DomainId {
        let id = DomainId(self.next_domain);
        self.next_domain += 1;
        self.domains.insert(id, 0);
        id
    }

    fn destroy_domain(&mut self, domain: DomainId) -> Result<()> {
        match self.domains.get(&domain) {
            None => Err(Error::UnknownDomain(domain)),
            Some(&live) if live > 0 => Err(Error::DomainInUse {
                domain,
                live_pages: live,
            }),
            Some(_) => {
                self.domains.remove(&domain);
                Ok(())
            }
        }
    }

    fn alloc_pages(&mut self, domain: DomainId, order: u32) -> Result<PageBlock> {
        let start = self.alloc(domain, order)?;
        Ok(PageBlock { start, order })
    }

    fn free_pages(&mut self, domain: DomainId, block: PageBlock) -> Result<u64> {
        if !self.domains.contains_key(&domain) {
            return Err(Error::UnknownDomain(domain));
        }
        self.free(domain, block.start, block.order)
    }

    fn usage(&self) -> PageUsage {
        PageUsage {
            allocated: self.allocated,
            loss: 0,
            stranded: 0,
            free: self.total - self.allocated,
        }
    }

    fn total_pages(&self) -> u64 {
        self.total
    }
}
