//! Brute-force isolation check. It rebuilds physical row ownership from
//! the live page blocks alone and flags any two rows within `n_guard` of
//! each other whose owners are not one and the same domain.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::alloc::Finding;
use crate::dram::{Dram, HalfRow, Location, RankParity};
use crate::modes::Machine;
use crate::types::{DomainId, PageBlock, Pfn};

/// Witnesses kept per report; the count covers all of them.
pub const MAX_WITNESSES: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub parity: RankParity,
    pub side: HalfRow,
    pub rows: (u32, u32),
    pub domains: (DomainId, DomainId),
    pub pfns: (Pfn, Pfn),
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct ViolationReport {
    pub violations: u64,
    pub witnesses: Vec<Violation>,
    pub findings: Vec<Finding>,
}

impl ViolationReport {
    pub fn is_clean(&self) -> bool {
        self.violations == 0 && self.findings.is_empty()
    }

    pub fn merge(&mut self, other: ViolationReport) {
        self.violations += other.violations;
        let room = MAX_WITNESSES.saturating_sub(self.witnesses.len());
        self.witnesses.extend(other.witnesses.into_iter().take(room));
        self.findings.extend(other.findings);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Owners {
    Empty,
    One(DomainId, Pfn),
    Many((DomainId, Pfn), (DomainId, Pfn)),
}

impl Owners {
    fn add(&mut self, d: DomainId, pfn: Pfn) {
        *self = match *self {
            Owners::Empty => Owners::One(d, pfn),
            Owners::One(x, p) if x != d => Owners::Many((x, p), (d, pfn)),
            other => other,
        };
    }

    /// A pair of distinct domains, one from each side, if there is one.
    fn clash(self, other: Owners) -> Option<((DomainId, Pfn), (DomainId, Pfn))> {
        let pick = |o: Owners| match o {
            Owners::Empty => None,
            Owners::One(d, p) => Some([(d, p), (d, p)]),
            Owners::Many(a, b) => Some([a, b]),
        };
        let (a, b) = (pick(self)?, pick(other)?);
        a.iter()
            .flat_map(|x| b.iter().map(move |y| (*x, *y)))
            .find(|(x, y)| x.0 != y.0)
    }
}

/// Flags every pair of physical rows `1..=n_guard` apart, in any of the
/// four (rank parity, half-row) spaces, whose owners are not a single
/// shared domain. Rows shared by several domains count against every
/// occupied row within reach.
pub fn check_isolation<I>(dram: &Dram, n_guard: u32, blocks: I) -> ViolationReport
where
    I: IntoIterator<Item = (DomainId, PageBlock)>,
{
    let geo = dram.geometry();
    let map = dram.map();
    let rows = geo.total_global_rows() as usize;
    let shift = geo.pages_per_global_row().trailing_zeros();

    let mut by_row = vec![Owners::Empty; rows];
    for (d, b) in blocks {
        let first = (b.start.0 >> shift) as usize;
        let last = ((b.start.0 + b.len() - 1) >> shift) as usize;
        for r in first..=last.min(rows - 1) {
            let pfn = Pfn(b.start.0.max((r as u64) << shift));
            by_row[r].add(d, pfn);
        }
    }

    let mut report = ViolationReport::default();
    if n_guard == 0 {
        return report;
    }
    for loc in Location::ALL {
        let mut phys = vec![Owners::Empty; rows];
        for (r, o) in by_row.iter().enumerate() {
            if *o != Owners::Empty {
                phys[map.physical(r as u32, loc) as usize] = *o;
            }
        }
        for p in 0..rows {
            if phys[p] == Owners::Empty {
                continue;
            }
            for dist in 1..=n_guard as usize {
                let q = p + dist;
                if q >= rows {
                    break;
                }
                if let Some((a, b)) = phys[p].clash(phys[q]) {
                    report.violations += 1;
                    if report.witnesses.len() < MAX_WITNESSES {
                        report.witnesses.push(Violation {
                            parity: loc.parity,
                            side: loc.side,
                            rows: (p as u32, q as u32),
                            domains: (a.0, b.0),
                            pfns: (a.1, b.1),
                        });
                    }
                }
            }
        }
    }
    report
}

/// Flags every reservation chunk of `chunk_rows` logical rows that holds
/// pages of more than one domain. This is the isolation promise of modes
/// without zonelets, and the only one left to check when `n_guard` is 0.
pub fn check_exclusive<I>(dram: &Dram, chunk_rows: u32, blocks: I) -> Vec<Finding>
where
    I: IntoIterator<Item = (DomainId, PageBlock)>,
{
    let geo = dram.geometry();
    let shift = geo.pages_per_global_row().trailing_zeros();
    let rows = geo.total_global_rows();
    let mut owner: BTreeMap<u32, DomainId> = BTreeMap::new();
    let mut shared = BTreeSet::new();
    for (d, b) in blocks {
        let first = b.start.0 >> shift;
        let last = ((b.start.0 + b.len() - 1) >> shift).min(rows - 1);
        for r in first..=last {
            let chunk = dram.grt().logical_of(r as u32) / chunk_rows;
            match owner.get(&chunk) {
                Some(&o) if o != d => {
                    shared.insert((chunk, o, d));
                }
                Some(_) => {}
                None => {
                    owner.insert(chunk, d);
                }
            }
        }
    }
    shared
        .into_iter()
        .map(|(chunk, a, b)| Finding {
            check: "exclusive",
            chunk: Some(chunk),
            detail: format!("chunk holds pages of {a} and {b}"),
        })
        .collect()
}

/// Allocator bookkeeping consistency; empty when sound.
pub fn audit_state(machine: &Machine) -> Vec<Finding> {
    machine.audit()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dram::DramConfig;

    fn dram() -> Dram {
        DramConfig::default().build().unwrap()
    }

    fn row_block(row: u64) -> PageBlock {
        PageBlock {
            start: Pfn(row * 256),
            order: 0,
        }
    }

    #[test]
    fn empty_is_clean() {
        let r = check_isolation(&dram(), 2, std::iter::empty());
        assert!(r.is_clean());
    }

    #[test]
    fn adjacent_domains_flagged() {
        let a = DomainId(1);
        let b = DomainId(2);
        let r = check_isolation(&dram(), 2, [(a, row_block(10)), (b, row_block(11))]);
        // the same pair shows up in all four spaces
        assert_eq!(r.violations, 4);
        assert_eq!(r.witnesses[0].rows, (10, 11));
        assert_eq!(r.witnesses[0].domains, (a, b));
    }

    #[test]
    fn distance_and_same_domain() {
        let a = DomainId(1);
        let b = DomainId(2);
        let d = dram();
        assert_eq!(check_isolation(&d, 2, [(a, row_block(10)), (b, row_block(12))]).violations, 4);
        assert!(check_isolation(&d, 2, [(a, row_block(10)), (b, row_block(13))]).is_clean());
        assert!(check_isolation(&d, 2, [(a, row_block(10)), (a, row_block(11))]).is_clean());
        assert!(check_isolation(&d, 0, [(a, row_block(10)), (b, row_block(11))]).is_clean());
    }

    #[test]
    fn shared_row_only_clashes_with_neighbors() {
        let a = DomainId(1);
        let b = DomainId(2);
        let d = dram();
        let shared = [
            (a, row_block(10)),
            (b, PageBlock { start: Pfn(10 * 256 + 5), order: 0 }),
        ];
        assert!(check_isolation(&d, 2, shared).is_clean());
        let mut near = shared.to_vec();
        near.push((a, row_block(12)));
        assert_eq!(check_isolation(&d, 2, near).violations, 4);
    }

    #[test]
    fn exclusive_chunks() {
        let a = DomainId(1);
        let b = DomainId(2);
        let d = dram();
        assert!(check_exclusive(&d, 16, [(a, row_block(0)), (b, row_block(16))]).is_empty());
        let f = check_exclusive(&d, 16, [(a, row_block(0)), (b, row_block(15)), (b, row_block(3))]);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].chunk, Some(0));
    }

    #[test]
    fn multi_row_blocks_cover_every_row() {
        let a = DomainId(1);
        let b = DomainId(2);
        let big = PageBlock { start: Pfn(0), order: 11 };
        let r = check_isolation(&dram(), 1, [(a, big), (b, row_block(8))]);
        assert_eq!(r.violations, 4);
        assert_eq!(r.witnesses[0].rows, (7, 8));
    }
}
