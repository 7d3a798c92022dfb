//! Physical adjacency between reservation chunks.
//!
//! A chunk is a run of `chunk_rows` consecutive logical rows. Adjacency is
//! evaluated separately in each of the four (rank parity, half-row) spaces;
//! two chunks are neighbors if any of their physical rows are one apart in
//! any space.

use std::collections::BTreeSet;

use super::grt::GlobalRowTable;
use super::transform::{AddressMap, Location};
use crate::error::{Error, Result};

pub fn chunk_count(grt: &GlobalRowTable, chunk_rows: u32) -> u32 {
    grt.logical_rows() as u32 / chunk_rows
}

fn check_chunk(chunk: u32, grt: &GlobalRowTable, chunk_rows: u32) -> Result<()> {
    let n = chunk_count(grt, chunk_rows);
    if chunk >= n {
        return Err(Error::OutOfRange {
            what: "chunk",
            value: chunk as u64,
            limit: n as u64,
        });
    }
    Ok(())
}

fn chunk_rows_iter<'a>(
    chunk: u32,
    grt: &'a GlobalRowTable,
    chunk_rows: u32,
) -> impl Iterator<Item = u32> + 'a {
    let first = chunk * chunk_rows;
    (first..first + chunk_rows).flat_map(move |l| grt.distinct_members(l).iter().copied())
}

/// Chunks owning a physical row at distance `1..=below` under, or
/// `1..=above` over, any physical row of `chunk`, in any space.
pub fn nearby_chunks(
    chunk: u32,
    map: &AddressMap,
    grt: &GlobalRowTable,
    chunk_rows: u32,
    below: u32,
    above: u32,
) -> Result<BTreeSet<u32>> {
    check_chunk(chunk, grt, chunk_rows)?;
    let rows = map.rows() as i64;
    let mut out = BTreeSet::new();
    for row in chunk_rows_iter(chunk, grt, chunk_rows) {
        for loc in Location::ALL {
            let p = map.physical(row, loc) as i64;
            let offsets = (1..=below as i64).map(|d| -d).chain(1..=above as i64);
            for d in offsets {
                let q = p + d;
                if q < 0 || q >= rows {
                    continue;
                }
                let other = map.row_at_unchecked(q as u32, loc);
                let c = grt.logical_of(other) / chunk_rows;
                if c != chunk {
                    out.insert(c);
                }
            }
        }
    }
    Ok(out)
}

/// Every distinct chunk with a physical row directly adjacent to one of
/// `chunk`'s rows. Never contains `chunk` itself.
pub fn chunk_neighbors(
    chunk: u32,
    map: &AddressMap,
    grt: &GlobalRowTable,
    chunk_rows: u32,
) -> Result<BTreeSet<u32>> {
    nearby_chunks(chunk, map, grt, chunk_rows, 1, 1)
}

/// Chunks holding rows within `distance` rows beneath `chunk`. Data placed
/// in `chunk`'s first rows without guards is only safe if all of these
/// belong to the same domain.
pub fn chunks_below(
    chunk: u32,
    map: &AddressMap,
    grt: &GlobalRowTable,
    chunk_rows: u32,
    distance: u32,
) -> Result<BTreeSet<u32>> {
    nearby_chunks(chunk, map, grt, chunk_rows, distance, 0)
}

/// Fraction of chunks with each neighbor count.
pub fn neighbor_histogram(
    map: &AddressMap,
    grt: &GlobalRowTable,
    chunk_rows: u32,
) -> Result<std::collections::BTreeMap<usize, usize>> {
    let mut hist = std::collections::BTreeMap::new();
    for c in 0..chunk_count(grt, chunk_rows) {
        let n = chunk_neighbors(c, map, grt, chunk_rows)?.len();
        *hist.entry(n).or_insert(0) += 1;
    }
    Ok(hist)
}
