//! Global Row Table.
//!
//! Mirroring and inversion spread one global row over up to four physical
//! row locations, and each of those locations holds the same small set of
//! row-IDs. The table groups those row-IDs into *logical global rows*: the
//! unit the allocator reserves, guards and stripes.
//!
//! Logical rows are numbered `block * 8 + offset`, where a block is a set of
//! 8-row groups closed under mirroring and inversion and `offset` is the
//! physical position inside the group. Groups whose orbit is smaller than
//! the table width are packed together so every logical row carries the
//! same number of row-IDs.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::Serialize;

use super::transform::{AddressMap, Location, GROUP_ROWS};
use crate::error::{Error, Result};

/// Members per logical row in the serialized form.
pub const MAX_MEMBERS: usize = 4;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct GrtBuildReport {
    /// orbit size -> number of 8-row-group orbits with that size
    pub orbit_sizes: BTreeMap<usize, usize>,
    /// logical rows whose members had to be padded with duplicates
    pub padded_logical_rows: usize,
}

#[derive(Clone, Debug)]
pub struct GlobalRowTable {
    width: usize,
    /// `width` row-IDs per logical row; distinct members come first
    members: Vec<u32>,
    distinct: Vec<u8>,
    /// row-ID -> logical row
    inverse: Vec<u32>,
    report: GrtBuildReport,
}

impl GlobalRowTable {
    pub fn build(map: &AddressMap) -> Result<Self> {
        if !map.is_complex() {
            return Ok(Self::identity(map.rows()));
        }
        let groups = map.rows() / GROUP_ROWS;
        let mut orbit_of = vec![u32::MAX; groups as usize];
        let mut orbits: Vec<Vec<u32>> = Vec::new();
        for g in 0..groups {
            if orbit_of[g as usize] != u32::MAX {
                continue;
            }
            let orbit = group_orbit(map, g)?;
            for &m in &orbit {
                orbit_of[m as usize] = orbits.len() as u32;
            }
            orbits.push(orbit);
        }

        let mut report = GrtBuildReport::default();
        for o in &orbits {
            *report.orbit_sizes.entry(o.len()).or_default() += 1;
        }
        let width = orbits.iter().map(Vec::len).max().unwrap_or(1);

        // full orbits stand alone; smaller ones are packed in ascending order,
        // largest sizes first, so bins fill exactly
        let mut blocks: Vec<Vec<u32>> = Vec::new();
        let mut short: Vec<&Vec<u32>> = Vec::new();
        for o in &orbits {
            if o.len() == width {
                blocks.push(o.clone());
            } else {
                short.push(o);
            }
        }
        short.sort_by_key(|o| (std::cmp::Reverse(o.len()), o[0]));
        let mut bin: Vec<u32> = Vec::new();
        for o in short {
            if bin.len() + o.len() > width {
                blocks.push(std::mem::take(&mut bin));
            }
            bin.extend_from_slice(o);
            if bin.len() == width {
                blocks.push(std::mem::take(&mut bin));
            }
        }
        if !bin.is_empty() {
            blocks.push(bin);
        }
        for b in &mut blocks {
            b.sort_unstable();
        }
        blocks.sort_unstable_by_key(|b| b[0]);

        let logical_rows = blocks.len() * GROUP_ROWS as usize;
        let mut members = Vec::with_capacity(logical_rows * width);
        let mut distinct = Vec::with_capacity(logical_rows);
        let mut inverse = vec![u32::MAX; map.rows() as usize];
        for (b, block) in blocks.iter().enumerate() {
            if block.len() < width {
                report.padded_logical_rows += GROUP_ROWS as usize;
            }
            for offset in 0..GROUP_ROWS {
                let logical = (b * GROUP_ROWS as usize) as u32 + offset;
                for k in 0..width {
                    let g = block[k % block.len()];
                    // the row of group g that lands on physical offset `offset`
                    let row = map.unscramble((g * GROUP_ROWS) | offset);
                    members.push(row);
                    if k < block.len() {
                        inverse[row as usize] = logical;
                    }
                }
                distinct.push(block.len() as u8);
            }
        }
        debug_assert!(inverse.iter().all(|&l| l != u32::MAX));
        Ok(GlobalRowTable {
            width,
            members,
            distinct,
            inverse,
            report,
        })
    }

    fn identity(rows: u32) -> Self {
        GlobalRowTable {
            width: 1,
            members: (0..rows).collect(),
            distinct: vec![1; rows as usize],
            inverse: (0..rows).collect(),
            report: GrtBuildReport {
                orbit_sizes: BTreeMap::from([(1, rows as usize)]),
                padded_logical_rows: 0,
            },
        }
    }

    /// Row-IDs per logical row (4 for the default complex transforms, 1 in
    /// simple mode).
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn logical_rows(&self) -> usize {
        self.distinct.len()
    }

    pub fn report(&self) -> &GrtBuildReport {
        &self.report
    }

    /// All `width` entries of a logical row, duplicates included.
    pub fn members(&self, logical: u32) -> &[u32] {
        let start = logical as usize * self.width;
        &self.members[start..start + self.width]
    }

    /// Only the distinct row-IDs of a logical row.
    pub fn distinct_members(&self, logical: u32) -> &[u32] {
        let m = self.members(logical);
        &m[..self.distinct[logical as usize] as usize]
    }

    pub fn distinct_count(&self, logical: u32) -> usize {
        self.distinct[logical as usize] as usize
    }

    pub fn logical_of(&self, row: u32) -> u32 {
        self.inverse[row as usize]
    }

    /// Position of `row` among its logical row's members.
    pub fn member_index(&self, row: u32) -> (u32, usize) {
        let logical = self.logical_of(row);
        let idx = self
            .distinct_members(logical)
            .iter()
            .position(|&m| m == row)
            .expect("inverse table out of sync");
        (logical, idx)
    }

    /// Size of the packed table: two bytes per entry.
    pub fn serialized_len(&self) -> usize {
        self.members.len() * 2
    }

    /// Packed table: one little-endian u16 per entry holding the entry's
    /// 8-row group index. The offset inside the group is implied by the
    /// logical index and the scramble function.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.serialized_len());
        for &row in &self.members {
            let group = row / GROUP_ROWS;
            let group = u16::try_from(group).map_err(|_| {
                Error::Transform(format!("group index {group} does not fit a 2-byte entry"))
            })?;
            out.extend_from_slice(&group.to_le_bytes());
        }
        Ok(out)
    }

    /// Inverse of [`to_bytes`](Self::to_bytes).
    pub fn decode_entries(bytes: &[u8], width: usize, map: &AddressMap) -> Vec<Vec<u32>> {
        bytes
            .chunks_exact(2 * width)
            .enumerate()
            .map(|(logical, rec)| {
                let offset = logical as u32 % GROUP_ROWS;
                rec.chunks_exact(2)
                    .map(|b| {
                        let group = u16::from_le_bytes([b[0], b[1]]) as u32;
                        map.unscramble(group * GROUP_ROWS | offset)
                    })
                    .collect()
            })
            .collect()
    }

    /// `logical_index,rowid0,rowid1,rowid2,rowid3`; narrower tables repeat
    /// their entries to keep the record fixed-width.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "logical_index,rowid0,rowid1,rowid2,rowid3")?;
        for logical in 0..self.logical_rows() as u32 {
            let m = self.members(logical);
            write!(w, "{logical}")?;
            for k in 0..MAX_MEMBERS {
                write!(w, ",{}", m[k % m.len()])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Closure of an 8-row group under mirroring and inversion. Mirroring and
/// inversion never alter the low three bits, so acting on group indices is
/// enough. A commuting pair generates at most four elements.
fn group_orbit(map: &AddressMap, group: u32) -> Result<Vec<u32>> {
    let mut seen = BTreeSet::from([group]);
    let mut frontier = vec![group];
    while let Some(g) = frontier.pop() {
        let row = g * GROUP_ROWS;
        for next in [map.mirror(row), map.invert(row)] {
            let ng = next / GROUP_ROWS;
            if seen.insert(ng) {
                if seen.len() > MAX_MEMBERS {
                    return Err(Error::Transform(format!(
                        "group {group} has an orbit larger than {MAX_MEMBERS}; \
                         mirroring and inversion must commute"
                    )));
                }
                frontier.push(ng);
            }
        }
    }
    Ok(seen.into_iter().collect())
}

/// Outcome of one invariant check.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CheckOutcome {
    pub passed: bool,
    pub counterexample: Option<String>,
}

impl CheckOutcome {
    fn pass() -> Self {
        CheckOutcome {
            passed: true,
            counterexample: None,
        }
    }

    fn fail(msg: String) -> Self {
        CheckOutcome {
            passed: false,
            counterexample: Some(msg),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TransformInvariantReport {
    /// every physical location of a logical row holds exactly its members
    pub orbit_closure: CheckOutcome,
    /// the i-th physical row of each location holds the same row-ID set
    pub index_consistency: CheckOutcome,
}

impl TransformInvariantReport {
    pub fn passed(&self) -> bool {
        self.orbit_closure.passed && self.index_consistency.passed
    }
}

/// Exhaustively checks both structural invariants the allocator relies on.
pub fn verify_transform_invariants(
    grt: &GlobalRowTable,
    map: &AddressMap,
) -> TransformInvariantReport {
    let mut closure = CheckOutcome::pass();
    'outer: for logical in 0..grt.logical_rows() as u32 {
        let expected: BTreeSet<u32> = grt.distinct_members(logical).iter().copied().collect();
        let reference: BTreeSet<u32> = expected
            .iter()
            .map(|&r| map.physical(r, Location::ALL[0]))
            .collect();
        for loc in Location::ALL {
            let phys: BTreeSet<u32> = expected.iter().map(|&r| map.physical(r, loc)).collect();
            let held: BTreeSet<u32> = reference
                .iter()
                .map(|&p| map.row_at_unchecked(p, loc))
                .collect();
            if phys != reference || held != expected {
                closure = CheckOutcome::fail(format!(
                    "logical row {logical} at {loc:?}: locations {phys:?} hold {held:?}, \
                     expected {expected:?}"
                ));
                break 'outer;
            }
        }
    }

    let mut index = CheckOutcome::pass();
    if map.is_complex() {
        let blocks = grt.logical_rows() as u32 / GROUP_ROWS;
        'blocks: for b in 0..blocks {
            let first = b * GROUP_ROWS;
            let groups: BTreeSet<u32> = grt
                .distinct_members(first)
                .iter()
                .map(|&r| map.physical(r, Location::ALL[0]) / GROUP_ROWS)
                .collect();
            for i in 0..GROUP_ROWS {
                let logical = first + i;
                let expected: BTreeSet<u32> =
                    grt.distinct_members(logical).iter().copied().collect();
                for loc in Location::ALL {
                    let held: BTreeSet<u32> = groups
                        .iter()
                        .map(|&g| map.row_at_unchecked(g * GROUP_ROWS + i, loc))
                        .collect();
                    if held != expected {
                        index = CheckOutcome::fail(format!(
                            "block {b} offset {i} at {loc:?}: holds {held:?}, expected {expected:?}"
                        ));
                        break 'blocks;
                    }
                }
            }
        }
    }
    TransformInvariantReport {
        orbit_closure: closure,
        index_consistency: index,
    }
}
