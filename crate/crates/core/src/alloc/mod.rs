//! The domain-aware allocator.
//!
//! Memory is handed out in chunks. A domain above the switch threshold gets
//! zones: groups of chunks whose first chunk starts with `n_guard` guard
//! rows. A zone grows by taking a free chunk whose lower neighbors all
//! belong to the zone already, so the new chunk needs no guards. Small
//! domains share zonelet chunks striped as `n_guard` guard rows followed by
//! one data row.

mod audit;
pub mod bits;
pub mod layout;
pub mod params;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::Serialize;
use smallvec::SmallVec;

pub use audit::Finding;
pub use params::{AllocatorParams, Mode};

use bits::Bits;
use layout::Layout;

use crate::dram::Dram;
use crate::error::{Error, Result};
use crate::metrics::PageUsage;
use crate::types::{DomainId, PageBlock, Pfn};

/// Interface shared by every allocator a replay can drive.
pub trait PageAllocator {
    fn create_domain(&mut self) -> DomainId;
    fn destroy_domain(&mut self, domain: DomainId) -> Result<()>;
    fn alloc_pages(&mut self, domain: DomainId, order: u32) -> Result<PageBlock>;
    fn free_pages(&mut self, domain: DomainId, block: PageBlock) -> Result<u64>;
    fn usage(&self) -> PageUsage;
    fn total_pages(&self) -> u64;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct ZoneId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkKind {
    Free,
    Zone(ZoneId),
    Zonelet,
}

#[derive(Clone, Debug)]
struct Chunk {
    kind: ChunkKind,
    /// first `n_guard` rows are guard rows
    guarded: bool,
    occ: Bits,
    used: u64,
}

#[derive(Clone, Debug)]
struct Zone {
    domain: DomainId,
    chunks: BTreeSet<u32>,
}

const NO_OWNER: u32 = u32::MAX;

#[derive(Clone, Debug)]
struct Region {
    seq: u64,
    /// owning domain per slot
    owners: Vec<u32>,
}

#[derive(Clone, Debug, Default)]
struct Domain {
    footprint: u64,
    zonelet_pages: u64,
    latched: bool,
    zones: Vec<ZoneId>,
    /// zone chunks with free data slots, keyed in search order
    open: BTreeSet<(ZoneId, u32)>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AllocStats {
    pub zones_created: u64,
    pub expansions: u64,
    /// expansions whose new chunk had a neighbor owned by someone else
    pub expansions_with_foreign_neighbor: u64,
    /// free chunks taken in, guarded, because they sat beneath an expansion
    pub expansion_extra_chunks: u64,
    pub chunks_released: u64,
    pub splits: u64,
    pub regions_provisioned: u64,
    pub regions_returned: u64,
}

#[derive(Clone, Debug)]
pub struct ZoneAllocator {
    dram: Arc<Dram>,
    params: AllocatorParams,
    layout: Layout,
    chunks: Vec<Chunk>,
    free: BTreeSet<u32>,
    domains: BTreeMap<DomainId, Domain>,
    zones: BTreeMap<ZoneId, Zone>,
    regions: BTreeMap<u32, Region>,
    open_regions: BTreeSet<(u64, u32)>,
    next_domain: u32,
    next_zone: u64,
    next_region: u64,
    stats: AllocStats,
}

/// Part of a page block that lies in one chunk.
#[derive(Clone, Copy, Debug)]
struct Segment {
    chunk: u32,
    slot: u64,
    len: u64,
}

impl ZoneAllocator {
    pub fn new(dram: Arc<Dram>, params: AllocatorParams) -> Result<Self> {
        let layout = Layout::new(&dram, &params)?;
        let chunks = (0..layout.n_chunks)
            .map(|_| Chunk {
                kind: ChunkKind::Free,
                guarded: false,
                occ: Bits::new(layout.chunk_slots),
                used: 0,
            })
            .collect();
        Ok(ZoneAllocator {
            free: (0..layout.n_chunks).collect(),
            dram,
            params,
            layout,
            chunks,
            domains: BTreeMap::new(),
            zones: BTreeMap::new(),
            regions: BTreeMap::new(),
            open_regions: BTreeSet::new(),
            next_domain: 0,
            next_zone: 0,
            next_region: 0,
            stats: AllocStats::default(),
        })
    }

    pub fn params(&self) -> &AllocatorParams {
        &self.params
    }

    pub fn dram(&self) -> &Arc<Dram> {
        &self.dram
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn stats(&self) -> &AllocStats {
        &self.stats
    }

    pub fn chunk_count(&self) -> u32 {
        self.layout.n_chunks
    }

    pub fn free_chunks(&self) -> usize {
        self.free.len()
    }

    pub fn chunk_kind(&self, chunk: u32) -> ChunkKind {
        self.chunks[chunk as usize].kind
    }

    pub fn chunk_guarded(&self, chunk: u32) -> bool {
        self.chunks[chunk as usize].guarded
    }

    pub fn chunk_used(&self, chunk: u32) -> u64 {
        self.chunks[chunk as usize].used
    }

    pub fn footprint_pages(&self, domain: DomainId) -> Option<u64> {
        self.domains.get(&domain).map(|d| d.footprint)
    }

    pub fn zonelet_pages(&self, domain: DomainId) -> Option<u64> {
        self.domains.get(&domain).map(|d| d.zonelet_pages)
    }

    pub fn above_threshold(&self, domain: DomainId) -> Option<bool> {
        self.domains.get(&domain).map(|d| d.latched)
    }

    /// The domain's zones in search order, each with its chunks.
    pub fn zones_of(&self, domain: DomainId) -> Vec<(ZoneId, Vec<u32>)> {
        self.domains
            .get(&domain)
            .map(|d| {
                d.zones
                    .iter()
                    .map(|z| (*z, self.zones[z].chunks.iter().copied().collect()))
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn domain_ids(&self) -> Vec<DomainId> {
        self.domains.keys().copied().collect()
    }

    pub fn zonelet_regions(&self) -> Vec<u32> {
        self.regions.keys().copied().collect()
    }

    fn page_bytes(&self) -> u64 {
        self.dram.geometry().page_bytes()
    }

    // ---- slot classification ----

    fn data_rows(&self, chunk: u32) -> impl Iterator<Item = u32> + '_ {
        let c = &self.chunks[chunk as usize];
        let (span, listed): (_, &[u32]) = match c.kind {
            ChunkKind::Free => (0..0, &[]),
            ChunkKind::Zone(_) => {
                let start = if c.guarded { self.layout.n_guard } else { 0 };
                (start..self.layout.chunk_rows, &[])
            }
            ChunkKind::Zonelet => (0..0, &self.layout.zonelet_rows),
        };
        span.chain(listed.iter().copied())
    }

    fn is_data_slot(&self, chunk: u32, slot: u64) -> bool {
        let c = &self.chunks[chunk as usize];
        let row = self.layout.row_of_slot(slot);
        let in_layout = match c.kind {
            ChunkKind::Free => false,
            ChunkKind::Zone(_) => !(c.guarded && row < self.layout.n_guard),
            ChunkKind::Zonelet => self.layout.is_zonelet_row(row),
        };
        in_layout && self.layout.is_real(&self.dram, chunk, slot)
    }

    /// Real pages of the chunk that may hold data under its current role.
    fn data_pages(&self, chunk: u32) -> u64 {
        let c = &self.chunks[chunk as usize];
        let i = chunk as usize;
        match c.kind {
            ChunkKind::Free => 0,
            ChunkKind::Zone(_) if c.guarded => {
                self.layout.real_pages[i] - self.layout.front_pages[i]
            }
            ChunkKind::Zone(_) => self.layout.real_pages[i],
            ChunkKind::Zonelet => self.layout.stripe_pages[i],
        }
    }

    fn front_clear(&self, chunk: u32) -> bool {
        let end = self.layout.n_guard as u64 * self.layout.lrow_pages;
        self.chunks[chunk as usize].occ.range_clear(0..end)
    }

    // ---- block geometry ----

    /// Splits a naturally aligned block into per-chunk slot runs.
    fn segments(&self, start: Pfn, order: u32) -> Result<SmallVec<[Segment; 2]>> {
        let len = 1u64 << order;
        if start.0 % len != 0 {
            return Err(Error::Ownership {
                pfn: start,
                domain: DomainId(u32::MAX),
                reason: "block is not aligned to its order",
            });
        }
        let total = self.dram.geometry().total_pages();
        if start.0 + len > total {
            return Err(Error::OutOfRange {
                what: "pfn",
                value: start.0 + len - 1,
                limit: total,
            });
        }
        let p = self.layout.pages_per_row;
        let step = len.min(p);
        let mut out = SmallVec::new();
        for k in 0..len / step {
            let (chunk, slot) = self.layout.locate(&self.dram, Pfn(start.0 + k * step))?;
            out.push(Segment {
                chunk,
                slot,
                len: step,
            });
        }
        Ok(out)
    }

    /// First-fit search for a free aligned block inside one chunk.
    fn find_block(&self, chunk: u32, order: u32) -> Option<Pfn> {
        let c = &self.chunks[chunk as usize];
        let len = 1u64 << order;
        let lay = &self.layout;
        if self.data_pages(chunk) < c.used + len {
            return None;
        }
        if order <= lay.row_shift {
            for row in self.data_rows(chunk) {
                let r = lay.real_row_slots(&self.dram, chunk, row);
                if len == 1 {
                    if let Some(s) = c.occ.first_zero_in(r) {
                        return Some(lay.slot_to_pfn(&self.dram, chunk, s));
                    }
                    continue;
                }
                let mut s = r.start;
                while s + len <= r.end {
                    if c.occ.range_clear(s..s + len) {
                        return Some(lay.slot_to_pfn(&self.dram, chunk, s));
                    }
                    s += len;
                }
            }
            return None;
        }
        let rows = len >> lay.row_shift;
        let total_rows = self.dram.geometry().total_global_rows();
        for row in self.data_rows(chunk) {
            let r = lay.real_row_slots(&self.dram, chunk, row);
            let mut s = r.start;
            while s < r.end {
                let pfn = lay.slot_to_pfn(&self.dram, chunk, s);
                let id = pfn.0 >> lay.row_shift;
                if id % rows == 0 && id + rows <= total_rows && self.block_fits(chunk, pfn, order) {
                    return Some(pfn);
                }
                s += lay.pages_per_row;
            }
        }
        None
    }

    fn block_fits(&self, chunk: u32, start: Pfn, order: u32) -> bool {
        let Ok(segs) = self.segments(start, order) else {
            return false;
        };
        segs.iter().all(|sg| {
            sg.chunk == chunk
                && self.is_data_slot(chunk, sg.slot)
                && self.chunks[chunk as usize]
                    .occ
                    .range_clear(sg.slot..sg.slot + sg.len)
        })
    }

    fn place(&mut self, domain: DomainId, start: Pfn, order: u32) -> PageBlock {
        let segs = self.segments(start, order).expect("placement was validated");
        for sg in &segs {
            let room = self.data_pages(sg.chunk);
            let c = &mut self.chunks[sg.chunk as usize];
            c.occ.set_range(sg.slot..sg.slot + sg.len);
            c.used += sg.len;
            let filled = c.used == room;
            if c.kind == ChunkKind::Zonelet {
                let region = self.regions.get_mut(&sg.chunk).expect("region record");
                region.owners[sg.slot as usize..(sg.slot + sg.len) as usize].fill(domain.0);
            }
            if filled {
                self.relist(sg.chunk);
            }
        }
        let len = 1u64 << order;
        let zonelet = self.chunks[segs[0].chunk as usize].kind == ChunkKind::Zonelet;
        let dom = self.domains.get_mut(&domain).expect("checked by caller");
        dom.footprint += len;
        if zonelet {
            dom.zonelet_pages += len;
        }
        PageBlock { start, order }
    }

    // ---- open-space indexes ----

    fn relist(&mut self, chunk: u32) {
        let spare = self.data_pages(chunk) > self.chunks[chunk as usize].used;
        match self.chunks[chunk as usize].kind {
            ChunkKind::Zone(z) => {
                let d = self.zones[&z].domain;
                let open = &mut self.domains.get_mut(&d).expect("zone owner").open;
                if spare {
                    open.insert((z, chunk));
                } else {
                    open.remove(&(z, chunk));
                }
            }
            ChunkKind::Zonelet => {
                let seq = self.regions[&chunk].seq;
                if spare {
                    self.open_regions.insert((seq, chunk));
                } else {
                    self.open_regions.remove(&(seq, chunk));
                }
            }
            ChunkKind::Free => {}
        }
    }

    fn unlist(&mut self, chunk: u32) {
        match self.chunks[chunk as usize].kind {
            ChunkKind::Zone(z) => {
                let d = self.zones[&z].domain;
                if let Some(dom) = self.domains.get_mut(&d) {
                    dom.open.remove(&(z, chunk));
                }
            }
            ChunkKind::Zonelet => {
                let seq = self.regions[&chunk].seq;
                self.open_regions.remove(&(seq, chunk));
            }
            ChunkKind::Free => {}
        }
    }

    // ---- domains ----

    pub fn create_domain(&mut self) -> DomainId {
        let id = DomainId(self.next_domain);
        self.next_domain += 1;
        self.domains.insert(id, Domain::default());
        id
    }

    pub fn destroy_domain(&mut self, domain: DomainId) -> Result<()> {
        let dom = self
            .domains
            .get(&domain)
            .ok_or(Error::UnknownDomain(domain))?;
        if dom.footprint != 0 {
            return Err(Error::DomainInUse {
                domain,
                live_pages: dom.footprint,
            });
        }
        for z in dom.zones.clone() {
            let chunks: Vec<u32> = self.zones[&z].chunks.iter().copied().collect();
            for c in chunks {
                self.release_zone_chunk(z, c);
            }
            self.zones.remove(&z);
        }
        self.domains.remove(&domain);
        Ok(())
    }

    // ---- allocation ----

    pub fn alloc_pages(&mut self, domain: DomainId, order: u32) -> Result<PageBlock> {
        let dom = self
            .domains
            .get(&domain)
            .ok_or(Error::UnknownDomain(domain))?;
        if order > self.params.max_order {
            return Err(Error::OrderTooLarge {
                order,
                max: self.params.max_order,
            });
        }
        let zl_max = self.layout.zonelet_max_order();
        let to_zonelet = match self.params.mode {
            Mode::Zebram => {
                if order > zl_max {
                    return Err(Error::OrderTooLarge { order, max: zl_max });
                }
                true
            }
            _ => {
                self.params.zonelets_enabled
                    && !dom.latched
                    && dom.footprint * self.page_bytes() < self.params.switch_threshold_bytes
                    && order <= zl_max
            }
        };
        let block = if to_zonelet {
            self.alloc_zonelet(domain, order)?
        } else {
            self.alloc_zone(domain, order)?
        };
        let threshold = self.params.switch_threshold_bytes;
        let page_bytes = self.page_bytes();
        let dom = self.domains.get_mut(&domain).expect("present");
        if dom.footprint * page_bytes >= threshold {
            dom.latched = true;
        }
        Ok(block)
    }

    /// Single pages from zonelets regardless of the domain's footprint.
    pub fn alloc_from_zonelet(&mut self, domain: DomainId, count: u64) -> Result<Vec<Pfn>> {
        if !self.params.zonelets_enabled {
            return Err(Error::ZoneletsDisabled);
        }
        if !self.domains.contains_key(&domain) {
            return Err(Error::UnknownDomain(domain));
        }
        let mut out = Vec::with_capacity(count as usize);
        for _ in 0..count {
            match self.alloc_zonelet(domain, 0) {
                Ok(b) => out.push(b.start),
                Err(e) => {
                    for pfn in out {
                        self.free_pages(domain, PageBlock { start: pfn, order: 0 })?;
                    }
                    return Err(e);
                }
            }
        }
        Ok(out)
    }

    fn oom(domain: DomainId, order: u32) -> Error {
        Error::OutOfMemory {
            domain,
            pages: 1 << order,
        }
    }

    fn alloc_zonelet(&mut self, domain: DomainId, order: u32) -> Result<PageBlock> {
        let hit = self
            .open_regions
            .iter()
            .find_map(|&(_, c)| self.find_block(c, order));
        if let Some(pfn) = hit {
            return Ok(self.place(domain, pfn, order));
        }
        let chunk = self.provision_zonelet_region()?;
        match self.find_block(chunk, order) {
            Some(pfn) => Ok(self.place(domain, pfn, order)),
            None => {
                self.return_region(chunk);
                Err(Self::oom(domain, order))
            }
        }
    }

    /// Stripes the highest-index free chunk. Zones grow from low indices,
    /// so keeping stripes at the top leaves zone neighbors free.
    pub fn provision_zonelet_region(&mut self) -> Result<u32> {
        if !self.params.zonelets_enabled {
            return Err(Error::ZoneletsDisabled);
        }
        let chunk = self.free.pop_last().ok_or(Error::OutOfMemory {
            domain: DomainId(u32::MAX),
            pages: 1,
        })?;
        let seq = self.next_region;
        self.next_region += 1;
        self.chunks[chunk as usize].kind = ChunkKind::Zonelet;
        self.chunks[chunk as usize].guarded = false;
        self.regions.insert(
            chunk,
            Region {
                seq,
                owners: vec![NO_OWNER; self.layout.chunk_slots as usize],
            },
        );
        self.stats.regions_provisioned += 1;
        self.relist(chunk);
        Ok(chunk)
    }

    fn return_region(&mut self, chunk: u32) {
        debug_assert_eq!(self.chunks[chunk as usize].used, 0);
        self.unlist(chunk);
        self.regions.remove(&chunk);
        self.chunks[chunk as usize].kind = ChunkKind::Free;
        self.free.insert(chunk);
        self.stats.regions_returned += 1;
    }

    fn alloc_zone(&mut self, domain: DomainId, order: u32) -> Result<PageBlock> {
        let hit = self.domains[&domain]
            .open
            .iter()
            .find_map(|&(_, c)| self.find_block(c, order));
        if let Some(pfn) = hit {
            return Ok(self.place(domain, pfn, order));
        }
        if self.params.expansion_enabled {
            if let Some((z, c, extra)) = self.expansion_candidate(domain) {
                self.expand(domain, z, c, &extra);
                let hit = std::iter::once(c)
                    .chain(extra.iter().copied())
                    .find_map(|x| self.find_block(x, order));
                if let Some(pfn) = hit {
                    return Ok(self.place(domain, pfn, order));
                }
                let mut cands = extra;
                cands.push(c);
                self.settle(z, cands);
            }
        }
        let chunk = self
            .new_zone_chunk()
            .ok_or_else(|| Self::oom(domain, order))?;
        let z = ZoneId(self.next_zone);
        self.next_zone += 1;
        self.zones.insert(
            z,
            Zone {
                domain,
                chunks: BTreeSet::new(),
            },
        );
        self.domains.get_mut(&domain).expect("present").zones.push(z);
        self.stats.zones_created += 1;
        self.attach(chunk, z, true);
        match self.find_block(chunk, order) {
            Some(pfn) => Ok(self.place(domain, pfn, order)),
            None => {
                self.settle(z, vec![chunk]);
                Err(Self::oom(domain, order))
            }
        }
    }

    fn owner_of_chunk(&self, chunk: u32) -> Option<DomainId> {
        match self.chunks[chunk as usize].kind {
            ChunkKind::Zone(z) => Some(self.zones[&z].domain),
            _ => None,
        }
    }

    /// A free chunk that can join one of the domain's zones without guard
    /// rows. Everything physically beneath it must be in that zone or free;
    /// the free ones join too, guarded. In linear addressing that leaves
    /// only the chunk right after the zone. Candidates needing the fewest
    /// extra chunks win, then the lowest index. Zones are tried in creation
    /// order.
    fn expansion_candidate(&self, domain: DomainId) -> Option<(ZoneId, u32, Vec<u32>)> {
        for &z in &self.domains[&domain].zones {
            let zone = &self.zones[&z];
            let best = zone
                .chunks
                .iter()
                .flat_map(|&y| self.layout.above[y as usize].iter().copied())
                .filter(|&c| self.chunks[c as usize].kind == ChunkKind::Free)
                .filter_map(|c| {
                    let below = &self.layout.below[c as usize];
                    let mut extra = Vec::new();
                    for &b in below {
                        if zone.chunks.contains(&b) {
                            continue;
                        }
                        if self.chunks[b as usize].kind != ChunkKind::Free {
                            return None;
                        }
                        extra.push(b);
                    }
                    Some((extra.len(), c, extra))
                })
                .min_by_key(|(n, c, _)| (*n, *c));
            if let Some((_, c, extra)) = best {
                return Some((z, c, extra));
            }
        }
        None
    }

    fn expand(&mut self, domain: DomainId, z: ZoneId, c: u32, extra: &[u32]) {
        for &b in extra {
            self.attach(b, z, true);
        }
        self.attach(c, z, false);
        self.stats.expansions += 1;
        self.stats.expansion_extra_chunks += extra.len() as u64;
        let foreign = self.layout.neighbors[c as usize].iter().any(|&n| {
            self.chunks[n as usize].kind != ChunkKind::Free && self.owner_of_chunk(n) != Some(domain)
        });
        if foreign {
            self.stats.expansions_with_foreign_neighbor += 1;
        }
    }

    /// Lowest free chunk whose neighbors are all free, else the lowest
    /// free chunk.
    fn new_zone_chunk(&self) -> Option<u32> {
        self.free
            .iter()
            .copied()
            .find(|&c| {
                self.layout.neighbors[c as usize]
                    .iter()
                    .all(|n| self.free.contains(n))
            })
            .or_else(|| self.free.first().copied())
    }

    /// Public entry point for the expansion step alone.
    pub fn try_expand_zone(&mut self, domain: DomainId) -> Option<(ZoneId, u32)> {
        if !self.domains.contains_key(&domain) {
            return None;
        }
        let (z, c, extra) = self.expansion_candidate(domain)?;
        self.expand(domain, z, c, &extra);
        Some((z, c))
    }

    fn attach(&mut self, chunk: u32, zone: ZoneId, guarded: bool) {
        let removed = self.free.remove(&chunk);
        debug_assert!(removed);
        let c = &mut self.chunks[chunk as usize];
        c.kind = ChunkKind::Zone(zone);
        c.guarded = guarded;
        self.zones
            .get_mut(&zone)
            .expect("zone exists")
            .chunks
            .insert(chunk);
        self.relist(chunk);
    }

    // ---- deallocation ----

    pub fn free_pages(&mut self, domain: DomainId, block: PageBlock) -> Result<u64> {
        if !self.domains.contains_key(&domain) {
            return Err(Error::UnknownDomain(domain));
        }
        let segs = self.segments(block.start, block.order).map_err(|e| match e {
            Error::Ownership { pfn, reason, .. } => Error::Ownership {
                pfn,
                domain,
                reason,
            },
            e => e,
        })?;
        for sg in &segs {
            let pfn = self.layout.slot_to_pfn(&self.dram, sg.chunk, sg.slot);
            let err = |reason| Error::Ownership {
                pfn,
                domain,
                reason,
            };
            let c = &self.chunks[sg.chunk as usize];
            if !c.occ.range_full(sg.slot..sg.slot + sg.len) {
                return Err(err("page is not allocated"));
            }
            match c.kind {
                ChunkKind::Free => return Err(err("page lies in a free chunk")),
                ChunkKind::Zone(z) => {
                    if self.zones[&z].domain != domain {
                        return Err(err("page belongs to another domain's zone"));
                    }
                }
                ChunkKind::Zonelet => {
                    let owners = &self.regions[&sg.chunk].owners;
                    let r = sg.slot as usize..(sg.slot + sg.len) as usize;
                    if owners[r].iter().any(|&o| o != domain.0) {
                        return Err(err("zonelet page belongs to another domain"));
                    }
                }
            }
        }

        // (chunk, lowest freed row, was full)
        let mut touched: SmallVec<[(u32, u32, bool); 2]> = SmallVec::new();
        let mut zonelet_pages = 0;
        for sg in &segs {
            let was_full = self.chunks[sg.chunk as usize].used == self.data_pages(sg.chunk);
            let c = &mut self.chunks[sg.chunk as usize];
            c.occ.clear_range(sg.slot..sg.slot + sg.len);
            c.used -= sg.len;
            if c.kind == ChunkKind::Zonelet {
                zonelet_pages += sg.len;
                let owners = &mut self.regions.get_mut(&sg.chunk).expect("region").owners;
                owners[sg.slot as usize..(sg.slot + sg.len) as usize].fill(NO_OWNER);
            }
            let row = self.layout.row_of_slot(sg.slot);
            match touched.iter_mut().find(|t| t.0 == sg.chunk) {
                Some(t) => {
                    t.1 = t.1.min(row);
                    t.2 |= was_full;
                }
                None => touched.push((sg.chunk, row, was_full)),
            }
        }
        let len = 1u64 << block.order;
        let dom = self.domains.get_mut(&domain).expect("present");
        dom.footprint -= len;
        dom.zonelet_pages -= zonelet_pages;

        for (chunk, low_row, was_full) in touched {
            match self.chunks[chunk as usize].kind {
                ChunkKind::Zonelet => {
                    if self.chunks[chunk as usize].used == 0 {
                        self.return_region(chunk);
                    } else if was_full {
                        self.relist(chunk);
                    }
                }
                ChunkKind::Zone(z) => {
                    if was_full {
                        self.relist(chunk);
                    }
                    let mut cands = Vec::new();
                    let c = &self.chunks[chunk as usize];
                    if c.used == 0 {
                        cands.push(chunk);
                    }
                    if !c.guarded && low_row < self.layout.n_guard {
                        cands.extend(self.empty_below_in_zone(chunk, z));
                    }
                    if !cands.is_empty() {
                        self.settle(z, cands);
                    }
                }
                ChunkKind::Free => unreachable!("validated above"),
            }
        }
        Ok(len)
    }

    fn empty_below_in_zone(&self, chunk: u32, z: ZoneId) -> Vec<u32> {
        self.layout.below[chunk as usize]
            .iter()
            .copied()
            .filter(|&b| {
                let c = &self.chunks[b as usize];
                c.kind == ChunkKind::Zone(z) && c.used == 0
            })
            .collect()
    }

    /// Unguarded chunks of zone `z` that rely on `chunk` being in the zone.
    fn dependents(&self, chunk: u32, z: ZoneId) -> Vec<u32> {
        self.layout.above[chunk as usize]
            .iter()
            .copied()
            .filter(|&y| {
                let c = &self.chunks[y as usize];
                c.kind == ChunkKind::Zone(z)
                    && !c.guarded
                    && self.layout.below[y as usize].contains(&chunk)
            })
            .collect()
    }

    /// An empty zone chunk can go back to the pool when every chunk that
    /// depends on it for isolation can turn its first rows into guards.
    fn releasable(&self, chunk: u32, z: ZoneId) -> Option<Vec<u32>> {
        let c = &self.chunks[chunk as usize];
        if c.kind != ChunkKind::Zone(z) || c.used != 0 {
            return None;
        }
        let deps = self.dependents(chunk, z);
        deps.iter().all(|&y| self.front_clear(y)).then_some(deps)
    }

    /// Applies shrink/reclaim/split until nothing else can be released.
    /// In linear addressing this is exactly: drop an empty first chunk and
    /// guard the next one, drop an empty last chunk, or drop an empty
    /// interior chunk, guard its successor and split.
    fn settle(&mut self, z: ZoneId, candidates: Vec<u32>) {
        let mut work: BTreeSet<u32> = candidates.into_iter().collect();
        let mut released = false;
        while let Some(x) = work.pop_first() {
            let Some(deps) = self.releasable(x, z) else {
                continue;
            };
            let below_x = self.empty_below_in_zone(x, z);
            self.release_zone_chunk(z, x);
            released = true;
            for y in deps {
                self.unlist(y);
                self.chunks[y as usize].guarded = true;
                self.relist(y);
                work.extend(self.empty_below_in_zone(y, z));
                if self.chunks[y as usize].used == 0 {
                    work.insert(y);
                }
            }
            work.extend(below_x);
        }
        if released {
            self.split_zone(z);
        }
    }

    fn release_zone_chunk(&mut self, z: ZoneId, chunk: u32) {
        debug_assert_eq!(self.chunks[chunk as usize].used, 0);
        self.unlist(chunk);
        let c = &mut self.chunks[chunk as usize];
        c.kind = ChunkKind::Free;
        c.guarded = false;
        self.zones.get_mut(&z).expect("zone").chunks.remove(&chunk);
        self.free.insert(chunk);
        self.stats.chunks_released += 1;
    }

    /// Breaks a zone into the pieces that still hang together: an unguarded
    /// chunk is tied to every zone chunk beneath it.
    fn split_zone(&mut self, z: ZoneId) {
        let zone = &self.zones[&z];
        let domain = zone.domain;
        let members: Vec<u32> = zone.chunks.iter().copied().collect();
        if members.is_empty() {
            self.zones.remove(&z);
            if let Some(d) = self.domains.get_mut(&domain) {
                d.zones.retain(|&x| x != z);
            }
            return;
        }
        let comps = self.components(&members);
        if comps.len() == 1 {
            return;
        }
        self.stats.splits += 1;
        let mut iter = comps.into_iter();
        let keep = iter.next().expect("non-empty");
        self.zones.get_mut(&z).expect("zone").chunks = keep.into_iter().collect();
        for comp in iter {
            let nz = ZoneId(self.next_zone);
            self.next_zone += 1;
            for &c in &comp {
                self.unlist(c);
            }
            self.zones.insert(
                nz,
                Zone {
                    domain,
                    chunks: comp.iter().copied().collect(),
                },
            );
            self.domains
                .get_mut(&domain)
                .expect("owner")
                .zones
                .push(nz);
            for &c in &comp {
                self.chunks[c as usize].kind = ChunkKind::Zone(nz);
                self.relist(c);
            }
        }
    }

    /// Connected pieces of a sorted chunk set, ordered by lowest chunk.
    fn components(&self, members: &[u32]) -> Vec<Vec<u32>> {
        let mut parent: Vec<usize> = (0..members.len()).collect();
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        for (i, &y) in members.iter().enumerate() {
            if self.chunks[y as usize].guarded {
                continue;
            }
            for b in &self.layout.below[y as usize] {
                if let Ok(j) = members.binary_search(b) {
                    let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
        let mut groups: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
        for (i, &c) in members.iter().enumerate() {
            let r = find(&mut parent, i);
            groups.entry(r).or_default().push(c);
        }
        let mut out: Vec<Vec<u32>> = groups.into_values().collect();
        out.sort_by_key(|g| g[0]);
        out
    }

    // ---- frames ----

    /// PFN of slot `index` of `chunk`. Free chunks are laid out like the
    /// first chunk of a new zone.
    pub fn select_frame(&self, chunk: u32, index: u64) -> Result<Pfn> {
        if chunk >= self.layout.n_chunks {
            return Err(Error::OutOfRange {
                what: "chunk",
                value: chunk as u64,
                limit: self.layout.n_chunks as u64,
            });
        }
        if index >= self.layout.chunk_slots || !self.layout.is_real(&self.dram, chunk, index) {
            return Err(Error::OutOfRange {
                what: "chunk page index",
                value: index,
                limit: self.layout.chunk_slots,
            });
        }
        let row = self.layout.row_of_slot(index);
        let c = &self.chunks[chunk as usize];
        let guard = match c.kind {
            ChunkKind::Free => row < self.layout.n_guard,
            ChunkKind::Zone(_) => c.guarded && row < self.layout.n_guard,
            ChunkKind::Zonelet => !self.layout.is_zonelet_row(row),
        };
        if guard {
            return Err(Error::GuardPosition {
                chunk,
                index: index as u32,
            });
        }
        Ok(self.layout.slot_to_pfn(&self.dram, chunk, index))
    }

    /// Chunk holding `pfn`, through the inverse table.
    pub fn chunk_of(&self, pfn: Pfn) -> Result<u32> {
        Ok(self.layout.locate(&self.dram, pfn)?.0)
    }

    // ---- accounting ----

    pub fn usage(&self) -> PageUsage {
        let mut u = PageUsage::default();
        for (i, c) in self.chunks.iter().enumerate() {
            let real = self.layout.real_pages[i];
            match c.kind {
                ChunkKind::Free => u.free += real,
                ChunkKind::Zone(_) => {
                    let data = self.data_pages(i as u32);
                    u.loss += real - data;
                    u.allocated += c.used;
                    u.stranded += data - c.used;
                }
                ChunkKind::Zonelet => {
                    let data = self.layout.stripe_pages[i];
                    u.loss += real - data;
                    u.allocated += c.used;
                    u.free += data - c.used;
                }
            }
        }
        u
    }

    /// Guard pages and total pages over zone chunks only.
    pub fn zone_loss(&self) -> (u64, u64) {
        let mut guard = 0;
        let mut total = 0;
        for (i, c) in self.chunks.iter().enumerate() {
            if let ChunkKind::Zone(_) = c.kind {
                total += self.layout.real_pages[i];
                guard += self.layout.real_pages[i] - self.data_pages(i as u32);
            }
        }
        (guard, total)
    }

    /// Worst guard-loss fraction of any single zone chunk.
    pub fn max_zone_chunk_loss(&self) -> f64 {
        self.chunks
            .iter()
            .enumerate()
            .filter(|(_, c)| matches!(c.kind, ChunkKind::Zone(_)))
            .map(|(i, _)| {
                let real = self.layout.real_pages[i];
                (real - self.data_pages(i as u32)) as f64 / real as f64
            })
            .fold(0.0, f64::max)
    }

    pub fn metadata_size(&self) -> MetadataSize {
        let n = self.layout.n_chunks as u64;
        let bitvectors = n * self.layout.chunk_slots.div_ceil(8);
        let grt = self.dram.grt().serialized_len() as u64;
        let dynamic = self.domains.len() as u64 * DOMAIN_RECORD
            + self.zones.len() as u64 * ZONE_RECORD
            + self.regions.len() as u64 * (REGION_RECORD + self.layout.chunk_slots * 4);
        MetadataSize {
            chunk_bitvectors: bitvectors,
            grt,
            chunk_table: n * CHUNK_RECORD,
            free_chunk_bitmap: n.div_ceil(8),
            static_total: bitvectors + grt + n * CHUNK_RECORD + n.div_ceil(8),
            inverse_grt: self.dram.geometry().total_global_rows() * 2,
            dynamic,
        }
    }

    pub fn snapshot(&self) -> StateSnapshot {
        StateSnapshot {
            params: self.params.clone(),
            usage: self.usage(),
            free_chunks: self.free.len() as u64,
            chunks: self
                .chunks
                .iter()
                .enumerate()
                .filter(|(_, c)| c.kind != ChunkKind::Free)
                .map(|(i, c)| ChunkSummary {
                    index: i as u32,
                    kind: c.kind,
                    guarded: c.guarded,
                    used_pages: c.used,
                    data_pages: self.data_pages(i as u32),
                })
                .collect(),
            domains: self
                .domains
                .iter()
                .map(|(&id, d)| DomainSummary {
                    id,
                    footprint_pages: d.footprint,
                    zonelet_pages: d.zonelet_pages,
                    above_threshold: d.latched,
                    zones: d
                        .zones
                        .iter()
                        .map(|z| ZoneSummary {
                            id: *z,
                            chunks: self.zones[z].chunks.iter().copied().collect(),
                        })
                        .collect(),
                })
                .collect(),
            stats: self.stats.clone(),
        }
    }
}

/// Per-record sizes behind [`MetadataSize`]: a chunk entry packs its kind,
/// guard flag and zone index into four bytes.
pub const CHUNK_RECORD: u64 = 4;
pub const DOMAIN_RECORD: u64 = 32;
pub const ZONE_RECORD: u64 = 16;
pub const REGION_RECORD: u64 = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MetadataSize {
    pub chunk_bitvectors: u64,
    pub grt: u64,
    pub chunk_table: u64,
    pub free_chunk_bitmap: u64,
    pub static_total: u64,
    /// optional reverse table; the allocator can rebuild it from the GRT
    pub inverse_grt: u64,
    pub dynamic: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ChunkSummary {
    pub index: u32,
    pub kind: ChunkKind,
    pub guarded: bool,
    pub used_pages: u64,
    pub data_pages: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ZoneSummary {
    pub id: ZoneId,
    pub chunks: Vec<u32>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DomainSummary {
    pub id: DomainId,
    pub footprint_pages: u64,
    pub zonelet_pages: u64,
    pub above_threshold: bool,
    pub zones: Vec<ZoneSummary>,
}

/// JSON-friendly view of the allocator state.
#[derive(Clone, Debug, Serialize)]
pub struct StateSnapshot {
    pub params: AllocatorParams,
    pub usage: PageUsage,
    pub free_chunks: u64,
    pub chunks: Vec<ChunkSummary>,
    pub domains: Vec<DomainSummary>,
    pub stats: AllocStats,
}

impl PageAllocator for ZoneAllocator {
    fn create_domain(&mut self) -> DomainId {
        ZoneAllocator::create_domain(self)
    }

    fn destroy_domain(&mut self, domain: DomainId) -> Result<()> {
        ZoneAllocator::destroy_domain(self, domain)
    }

    fn alloc_pages(&mut self, domain: DomainId, order: u32) -> Result<PageBlock> {
        ZoneAllocator::alloc_pages(self, domain, order)
    }

    fn free_pages(&mut self, domain: DomainId, block: PageBlock) -> Result<u64> {
        ZoneAllocator::free_pages(self, domain, block)
    }

    fn usage(&self) -> PageUsage {
        ZoneAllocator::usage(self)
    }

    fn total_pages(&self) -> u64 {
        self.layout.real_pages.iter().sum()
    }
}

#[cfg(test)]
mod tests;
