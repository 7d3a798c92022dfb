//! Chunk geometry: page slots inside a chunk, their frames, and the chunks
//! physically around each chunk.
//!
//! Slot `s` of a chunk sits in logical row `s / lrow_pages`, member
//! `(s % lrow_pages) / pages_per_row` of that row, page `s % pages_per_row`.
//! Members past a logical row's distinct count are padding and never hold
//! data.

use std::ops::Range;

use super::params::AllocatorParams;
use crate::dram::neighbors::nearby_chunks;
use crate::dram::Dram;
use crate::error::Result;
use crate::types::Pfn;

#[derive(Clone, Debug)]
pub struct Layout {
    pub chunk_rows: u32,
    pub n_guard: u32,
    pub n_chunks: u32,
    pub pages_per_row: u64,
    pub row_shift: u32,
    pub lrow_pages: u64,
    pub chunk_slots: u64,
    pub zonelet_rows: Vec<u32>,
    /// chunks holding rows up to `max(n_guard, 1)` rows under / over a chunk
    pub below: Vec<Vec<u32>>,
    pub above: Vec<Vec<u32>>,
    /// chunks at distance one
    pub neighbors: Vec<Vec<u32>>,
    /// real (non-padding) pages per chunk
    pub real_pages: Vec<u64>,
    /// real pages in the first `n_guard` rows
    pub front_pages: Vec<u64>,
    /// real pages in zonelet data rows
    pub stripe_pages: Vec<u64>,
    padded: bool,
}

impl Layout {
    pub fn new(dram: &Dram, params: &AllocatorParams) -> Result<Self> {
        params.validate(dram)?;
        let grt = dram.grt();
        let cr = params.chunk_rows;
        let n_chunks = dram.logical_rows() / cr;
        let p = dram.pages_per_row();
        let lrow_pages = dram.pages_per_logical_row();
        let reach = params.n_guard.max(1);
        let mut below = Vec::with_capacity(n_chunks as usize);
        let mut above = Vec::with_capacity(n_chunks as usize);
        let mut neighbors = Vec::with_capacity(n_chunks as usize);
        for c in 0..n_chunks {
            below.push(nearby_chunks(c, dram.map(), grt, cr, reach, 0)?.into_iter().collect());
            above.push(nearby_chunks(c, dram.map(), grt, cr, 0, reach)?.into_iter().collect());
            neighbors.push(nearby_chunks(c, dram.map(), grt, cr, 1, 1)?.into_iter().collect());
        }
        let zonelet_rows = params.zonelet_data_rows();
        let mut real_pages = Vec::with_capacity(n_chunks as usize);
        let mut front_pages = Vec::with_capacity(n_chunks as usize);
        let mut stripe_pages = Vec::with_capacity(n_chunks as usize);
        let mut padded = false;
        for c in 0..n_chunks {
            let row_real = |r: u32| grt.distinct_count(c * cr + r) as u64 * p;
            real_pages.push((0..cr).map(row_real).sum());
            front_pages.push((0..params.n_guard).map(row_real).sum());
            stripe_pages.push(zonelet_rows.iter().map(|&r| row_real(r)).sum());
            padded |= (0..cr).any(|r| grt.distinct_count(c * cr + r) != grt.width());
        }
        Ok(Layout {
            chunk_rows: cr,
            n_guard: params.n_guard,
            n_chunks,
            pages_per_row: p,
            row_shift: p.trailing_zeros(),
            lrow_pages,
            chunk_slots: cr as u64 * lrow_pages,
            zonelet_rows,
            below,
            above,
            neighbors,
            real_pages,
            front_pages,
            stripe_pages,
            padded,
        })
    }

    pub fn row_of_slot(&self, slot: u64) -> u32 {
        (slot / self.lrow_pages) as u32
    }

    pub fn row_slots(&self, row: u32) -> Range<u64> {
        let start = row as u64 * self.lrow_pages;
        start..start + self.lrow_pages
    }

    /// Whether `slot` addresses a real page (not GRT padding).
    pub fn is_real(&self, dram: &Dram, chunk: u32, slot: u64) -> bool {
        if !self.padded {
            return true;
        }
        let logical = chunk * self.chunk_rows + self.row_of_slot(slot);
        let member = (slot % self.lrow_pages) / self.pages_per_row;
        (member as usize) < dram.grt().distinct_count(logical)
    }

    /// Real slot ranges of one row of a chunk, one per distinct member.
    pub fn real_row_slots(&self, dram: &Dram, chunk: u32, row: u32) -> Range<u64> {
        let logical = chunk * self.chunk_rows + row;
        let start = row as u64 * self.lrow_pages;
        start..start + dram.grt().distinct_count(logical) as u64 * self.pages_per_row
    }

    pub fn slot_to_pfn(&self, dram: &Dram, chunk: u32, slot: u64) -> Pfn {
        let logical = chunk * self.chunk_rows + self.row_of_slot(slot);
        let within = slot % self.lrow_pages;
        let member = (within / self.pages_per_row) as usize;
        let row = dram.grt().members(logical)[member] as u64;
        Pfn((row << self.row_shift) | (within % self.pages_per_row))
    }

    /// Chunk and slot holding `pfn`.
    pub fn locate(&self, dram: &Dram, pfn: Pfn) -> Result<(u32, u64)> {
        let row = dram.geometry().page_to_global_row(pfn)?;
        let (logical, member) = dram.grt().member_index(row);
        let chunk = logical / self.chunk_rows;
        let slot = (logical % self.chunk_rows) as u64 * self.lrow_pages
            + member as u64 * self.pages_per_row
            + (pfn.0 & (self.pages_per_row - 1));
        Ok((chunk, slot))
    }

    pub fn is_zonelet_row(&self, row: u32) -> bool {
        self.zonelet_rows.binary_search(&row).is_ok()
    }

    /// Largest order a zonelet serves: blocks stay inside one global row.
    pub fn zonelet_max_order(&self) -> u32 {
        self.row_shift
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dram::DramConfig;

    #[test]
    fn simple_slot_mapping_is_linear() {
        let dram = DramConfig::default().build().unwrap();
        let layout = Layout::new(&dram, &AllocatorParams::default()).unwrap();
        assert_eq!(layout.n_chunks, 8192);
        assert_eq!(layout.chunk_slots, 4096);
        // (chunk_start_row + row_offset) * 256 + slot
        let pfn = layout.slot_to_pfn(&dram, 3, 2 * 256 + 17);
        assert_eq!(pfn, Pfn((3 * 16 + 2) * 256 + 17));
        assert_eq!(layout.locate(&dram, pfn).unwrap(), (3, 2 * 256 + 17));
        assert_eq!(layout.below[5], vec![4]);
        assert_eq!(layout.above[5], vec![6]);
        assert_eq!(layout.front_pages[0], 512);
        assert_eq!(layout.stripe_pages[0], 5 * 256);
    }

    #[test]
    fn complex_slots_land_in_their_orbit() {
        let dram = DramConfig::complex().build().unwrap();
        let params = AllocatorParams {
            chunk_rows: 8,
            ..Default::default()
        };
        let layout = Layout::new(&dram, &params).unwrap();
        assert_eq!(layout.n_chunks, 4096);
        assert_eq!(layout.chunk_slots, 8 * 1024);
        for chunk in [0u32, 9, 4095] {
            for slot in (0..layout.chunk_slots).step_by(97) {
                let pfn = layout.slot_to_pfn(&dram, chunk, slot);
                let row = dram.geometry().page_to_global_row(pfn).unwrap();
                let logical = chunk * 8 + layout.row_of_slot(slot);
                assert!(dram.grt().distinct_members(logical).contains(&row));
                assert_eq!(layout.locate(&dram, pfn).unwrap(), (chunk, slot));
            }
        }
    }
}
