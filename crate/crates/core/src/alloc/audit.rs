//! Consistency audit of allocator bookkeeping.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::{ChunkKind, ZoneAllocator, NO_OWNER};
use crate::types::DomainId;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Finding {
    pub check: &'static str,
    pub chunk: Option<u32>,
    pub detail: String,
}

impl Finding {
    fn new(check: &'static str, chunk: Option<u32>, detail: String) -> Self {
        Finding {
            check,
            chunk,
            detail,
        }
    }
}

impl ZoneAllocator {
    /// Cross-checks bitvectors, ownership records, zones, guard placement,
    /// the shrink fixpoint and the free pool. Empty means consistent.
    pub fn audit(&self) -> Vec<Finding> {
        let mut out = Vec::new();
        let mut owned: BTreeMap<DomainId, (u64, u64)> = BTreeMap::new();

        for (i, c) in self.chunks.iter().enumerate() {
            let chunk = i as u32;
            let bits = c.occ.count();
            if bits != c.used {
                out.push(Finding::new(
                    "occupancy",
                    Some(chunk),
                    format!("used counter {} but {bits} bits set", c.used),
                ));
            }
            let stray = c.occ.ones().filter(|&s| !self.is_data_slot(chunk, s)).count();
            if stray > 0 {
                out.push(Finding::new(
                    "guard",
                    Some(chunk),
                    format!("{stray} allocated page(s) outside data rows"),
                ));
            }
            if (c.kind == ChunkKind::Free) != self.free.contains(&chunk) {
                out.push(Finding::new(
                    "free_pool",
                    Some(chunk),
                    format!("kind {:?} disagrees with free pool membership", c.kind),
                ));
            }
            match c.kind {
                ChunkKind::Free => {
                    if c.guarded {
                        out.push(Finding::new("free_pool", Some(chunk), "free chunk marked guarded".into()));
                    }
                }
                ChunkKind::Zone(z) => match self.zones.get(&z) {
                    Some(zone) if zone.chunks.contains(&chunk) => {
                        owned.entry(zone.domain).or_default().0 += c.used;
                    }
                    _ => out.push(Finding::new(
                        "contiguity",
                        Some(chunk),
                        format!("chunk claims zone {} which does not list it", z.0),
                    )),
                },
                ChunkKind::Zonelet => match self.regions.get(&chunk) {
                    None => out.push(Finding::new("ownership", Some(chunk), "zonelet chunk without region record".into())),
                    Some(region) => {
                        let mut mismatched = 0;
                        for (s, &o) in region.owners.iter().enumerate() {
                            if c.occ.get(s as u64) != (o != NO_OWNER) {
                                mismatched += 1;
                            }
                            if o != NO_OWNER {
                                owned.entry(DomainId(o)).or_default().1 += 1;
                            }
                        }
                        if mismatched > 0 {
                            out.push(Finding::new(
                                "ownership",
                                Some(chunk),
                                format!("{mismatched} slot(s) where owner map and bitvector disagree"),
                            ));
                        }
                    }
                },
            }
        }
        for &chunk in self.regions.keys() {
            if self.chunks[chunk as usize].kind != ChunkKind::Zonelet {
                out.push(Finding::new("ownership", Some(chunk), "region record on a non-zonelet chunk".into()));
            }
        }

        for (&id, d) in &self.domains {
            let (zone_pages, zl_pages) = owned.remove(&id).unwrap_or_default();
            if zone_pages + zl_pages != d.footprint || zl_pages != d.zonelet_pages {
                out.push(Finding::new(
                    "footprint",
                    None,
                    format!(
                        "domain {id}: recorded {} ({} in zonelets), found {} ({zl_pages} in zonelets)",
                        d.footprint,
                        d.zonelet_pages,
                        zone_pages + zl_pages
                    ),
                ));
            }
            let mut open = BTreeSet::new();
            for z in &d.zones {
                let Some(zone) = self.zones.get(z) else {
                    out.push(Finding::new("contiguity", None, format!("domain {id} lists missing zone {}", z.0)));
                    continue;
                };
                for &c in &zone.chunks {
                    if self.data_pages(c) > self.chunks[c as usize].used {
                        open.insert((*z, c));
                    }
                }
            }
            if open != d.open {
                out.push(Finding::new("index", None, format!("domain {id}: open-chunk index is stale")));
            }
        }
        for (id, _) in owned {
            out.push(Finding::new("footprint", None, format!("pages owned by unknown domain {id}")));
        }

        for (&z, zone) in &self.zones {
            if zone.chunks.is_empty() {
                out.push(Finding::new("contiguity", None, format!("zone {} is empty", z.0)));
                continue;
            }
            if !self.domains.get(&zone.domain).is_some_and(|d| d.zones.contains(&z)) {
                out.push(Finding::new("contiguity", None, format!("zone {} not listed by its domain", z.0)));
            }
            let members: Vec<u32> = zone.chunks.iter().copied().collect();
            for &c in &members {
                if self.chunks[c as usize].kind != ChunkKind::Zone(z) {
                    out.push(Finding::new(
                        "contiguity",
                        Some(c),
                        format!("zone {} lists chunk of kind {:?}", z.0, self.chunks[c as usize].kind),
                    ));
                }
            }
            if self.components(&members).len() != 1 {
                out.push(Finding::new(
                    "contiguity",
                    Some(members[0]),
                    format!("zone {} is not physically contiguous: {members:?}", z.0),
                ));
            }
            for &y in &members {
                if self.chunks[y as usize].guarded {
                    continue;
                }
                let below = &self.layout.below[y as usize];
                if below.is_empty() || below.iter().any(|b| !zone.chunks.contains(b)) {
                    out.push(Finding::new(
                        "guard",
                        Some(y),
                        format!("unguarded chunk of zone {} sits above chunks {below:?} outside the zone", z.0),
                    ));
                }
            }
            if !self.dram.map().is_complex() {
                let linear = members.windows(2).all(|w| w[1] == w[0] + 1);
                let front = members
                    .iter()
                    .enumerate()
                    .all(|(k, &c)| self.chunks[c as usize].guarded == (k == 0));
                if !linear || !front {
                    out.push(Finding::new(
                        "guard",
                        Some(members[0]),
                        format!("zone {} must be a run of chunks guarded only at its front", z.0),
                    ));
                }
            }
            for &c in &members {
                if self.releasable(c, z).is_some() {
                    out.push(Finding::new(
                        "fixpoint",
                        Some(c),
                        format!("empty chunk of zone {} could be released", z.0),
                    ));
                }
            }
        }
        out
    }
}
