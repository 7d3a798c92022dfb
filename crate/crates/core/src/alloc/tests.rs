use super::*;
use crate::dram::{DramConfig, GeometryConfig};

fn dram(rows: u64) -> Arc<Dram> {
    let cfg = DramConfig {
        geometry: GeometryConfig {
            rows_per_bank: rows,
            ..Default::default()
        },
        ..Default::default()
    };
    Arc::new(cfg.build().unwrap())
}

fn zones_only() -> AllocatorParams {
    AllocatorParams {
        zonelets_enabled: false,
        ..Default::default()
    }
}

fn fill_pages(a: &mut ZoneAllocator, d: DomainId, n: u64) -> Vec<PageBlock> {
    (0..n).map(|_| a.alloc_pages(d, 0).unwrap()).collect()
}

fn clean(a: &ZoneAllocator) {
    let f = a.audit();
    assert!(f.is_empty(), "{f:#?}");
    assert_eq!(a.usage().total(), a.total_pages());
}

#[test]
fn init_chunk_counts() {
    let a = ZoneAllocator::new(dram(131_072), AllocatorParams::default()).unwrap();
    assert_eq!(a.chunk_count(), 8192);
    assert_eq!(a.free_chunks(), 8192);

    let complex = Arc::new(DramConfig::complex().build().unwrap());
    let p = AllocatorParams {
        chunk_rows: 8,
        ..Default::default()
    };
    let a = ZoneAllocator::new(complex, p).unwrap();
    assert_eq!(a.chunk_count(), 4096);
    assert_eq!(a.layout().real_pages[0] * 4096, 32 << 20);

    let p = AllocatorParams {
        chunk_rows: 15,
        ..Default::default()
    };
    assert!(ZoneAllocator::new(dram(131_072), p).is_err());
}

#[test]
fn small_domain_lands_in_zonelet() {
    let mut a = ZoneAllocator::new(dram(1024), AllocatorParams::default()).unwrap();
    let d = a.create_domain();
    assert_eq!(a.footprint_pages(d), Some(0));
    let b = a.alloc_pages(d, 0).unwrap();
    let (chunk, slot) = a.layout().locate(a.dram(), b.start).unwrap();
    assert_eq!(a.chunk_kind(chunk), ChunkKind::Zonelet);
    assert!(a.layout().is_zonelet_row(a.layout().row_of_slot(slot)));
    // zonelets come from the top of memory
    assert_eq!(chunk, a.chunk_count() - 1);
    clean(&a);
}

/// Replays the allocation flow by hand: everything below 12 MiB goes to
/// zonelets, after that a fresh guarded chunk.
#[test]
fn threshold_switch_step_through() {
    let mut a = ZoneAllocator::new(dram(1024), AllocatorParams::default()).unwrap();
    let d = a.create_domain();
    let blocks = fill_pages(&mut a, d, 4096);
    let lay = a.layout().clone();
    let mut zone_chunks = BTreeSet::new();
    for (i, b) in blocks.iter().enumerate() {
        let (chunk, slot) = lay.locate(a.dram(), b.start).unwrap();
        if i < 3072 {
            assert_eq!(a.chunk_kind(chunk), ChunkKind::Zonelet, "page {i}");
        } else {
            assert!(matches!(a.chunk_kind(chunk), ChunkKind::Zone(_)), "page {i}");
            assert!(lay.row_of_slot(slot) >= 2);
            zone_chunks.insert(chunk);
        }
    }
    assert_eq!(zone_chunks.len(), 1);
    let first = *zone_chunks.first().unwrap();
    assert!(a.chunk_guarded(first));
    assert_eq!(a.zonelet_pages(d), Some(3072));
    assert_eq!(a.above_threshold(d), Some(true));
    clean(&a);
}

#[test]
fn order_limits() {
    let mut a = ZoneAllocator::new(dram(1024), AllocatorParams::default()).unwrap();
    let d = a.create_domain();
    assert!(matches!(
        a.alloc_pages(d, 20),
        Err(Error::OrderTooLarge { order: 20, max: 11 })
    ));
    assert!(matches!(
        a.alloc_pages(DomainId(99), 0),
        Err(Error::UnknownDomain(_))
    ));
}

#[test]
fn large_blocks_are_aligned_and_outside_guards() {
    let mut a = ZoneAllocator::new(dram(1024), zones_only()).unwrap();
    let d = a.create_domain();
    for order in [0, 3, 8, 9, 11, 5] {
        let b = a.alloc_pages(d, order).unwrap();
        assert_eq!(b.start.0 % (1 << order), 0);
        for pfn in b.pfns() {
            let (c, s) = a.layout().locate(a.dram(), pfn).unwrap();
            assert!(a.is_data_slot(c, s));
        }
    }
    clean(&a);
}

#[test]
fn alloc_from_zonelet_bypasses_threshold() {
    let mut a = ZoneAllocator::new(dram(1024), AllocatorParams::default()).unwrap();
    let d = a.create_domain();
    fill_pages(&mut a, d, 4096);
    assert_eq!(a.above_threshold(d), Some(true));
    let pfns = a.alloc_from_zonelet(d, 1).unwrap();
    let (chunk, _) = a.layout().locate(a.dram(), pfns[0]).unwrap();
    assert_eq!(a.chunk_kind(chunk), ChunkKind::Zonelet);
    assert!(a.alloc_from_zonelet(d, 0).unwrap().is_empty());
    clean(&a);

    let mut off = ZoneAllocator::new(dram(1024), zones_only()).unwrap();
    let d = off.create_domain();
    assert!(matches!(off.alloc_from_zonelet(d, 1), Err(Error::ZoneletsDisabled)));
}

#[test]
fn zonelet_capacity_exhaustion() {
    // 4 chunks of 16 rows: 4 * 5 * 256 zonelet pages
    let mut a = ZoneAllocator::new(dram(64), AllocatorParams::default()).unwrap();
    let d = a.create_domain();
    let cap = 4 * 5 * 256;
    assert_eq!(a.alloc_from_zonelet(d, cap).unwrap().len() as u64, cap);
    let e = a.create_domain();
    let before = a.usage();
    assert!(matches!(a.alloc_from_zonelet(e, 1), Err(Error::OutOfMemory { .. })));
    assert_eq!(a.usage(), before);
    clean(&a);
}

#[test]
fn alloc_free_round_trip() {
    let mut a = ZoneAllocator::new(dram(1024), AllocatorParams::default()).unwrap();
    let d = a.create_domain();
    let e = a.create_domain();
    fill_pages(&mut a, e, 5000);
    fill_pages(&mut a, d, 10);
    let before = serde_json::to_string(&a.snapshot().chunks).unwrap();
    let usage = a.usage();
    let b = a.alloc_pages(d, 0).unwrap();
    assert_eq!(a.free_pages(d, b).unwrap(), 1);
    assert_eq!(serde_json::to_string(&a.snapshot().chunks).unwrap(), before);
    assert_eq!(a.usage(), usage);
    clean(&a);
}

#[test]
fn foreign_and_double_frees_rejected() {
    let mut a = ZoneAllocator::new(dram(1024), AllocatorParams::default()).unwrap();
    let d = a.create_domain();
    let e = a.create_domain();
    let b = a.alloc_pages(d, 0).unwrap();
    assert!(matches!(a.free_pages(e, b), Err(Error::Ownership { .. })));
    a.free_pages(d, b).unwrap();
    assert!(matches!(a.free_pages(d, b), Err(Error::Ownership { .. })));
    let big = fill_pages(&mut a, e, 4000);
    assert!(matches!(a.free_pages(d, big[3999]), Err(Error::Ownership { .. })));
    clean(&a);
}

#[test]
fn freeing_everything_empties_the_pool() {
    let mut a = ZoneAllocator::new(dram(1024), AllocatorParams::default()).unwrap();
    let doms: Vec<_> = (0..5).map(|_| a.create_domain()).collect();
    let mut live = Vec::new();
    for (i, &d) in doms.iter().enumerate() {
        for b in fill_pages(&mut a, d, 1500 * i as u64 + 3) {
            live.push((d, b));
        }
    }
    clean(&a);
    // free in an interleaved order to exercise shrinking and splitting
    live.sort_by_key(|(_, b)| (b.start.0 * 7919) % 104_729);
    for (d, b) in live {
        a.free_pages(d, b).unwrap();
        assert!(a.audit().is_empty());
    }
    assert_eq!(a.free_chunks(), a.chunk_count() as usize);
    for d in doms {
        a.destroy_domain(d).unwrap();
    }
    assert!(a.domain_ids().is_empty());
}

#[test]
fn destroy_requires_empty_domain() {
    let mut a = ZoneAllocator::new(dram(1024), AllocatorParams::default()).unwrap();
    let d = a.create_domain();
    let b = a.alloc_pages(d, 0).unwrap();
    assert!(matches!(
        a.destroy_domain(d),
        Err(Error::DomainInUse { live_pages: 1, .. })
    ));
    a.free_pages(d, b).unwrap();
    a.destroy_domain(d).unwrap();
    assert_eq!(a.free_chunks(), a.chunk_count() as usize);
}

#[test]
fn pool_exhaustion_by_domains() {
    let mut a = ZoneAllocator::new(dram(1024), zones_only()).unwrap();
    for _ in 0..64 {
        let d = a.create_domain();
        a.alloc_pages(d, 0).unwrap();
    }
    assert_eq!(a.free_chunks(), 0);
    let d = a.create_domain();
    assert!(matches!(a.alloc_pages(d, 0), Err(Error::OutOfMemory { .. })));
    clean(&a);
}

/// Usable data rows of one zone.
fn zone_data_rows(a: &ZoneAllocator, d: DomainId) -> u64 {
    let lay = a.layout();
    a.zones_of(d)
        .iter()
        .flat_map(|(_, cs)| cs.iter())
        .map(|&c| a.data_pages(c) / lay.lrow_pages)
        .sum()
}

#[test]
fn expansion_appends_neighbor_chunk() {
    let mut a = ZoneAllocator::new(dram(1024), zones_only()).unwrap();
    let d = a.create_domain();
    fill_pages(&mut a, d, 14 * 256);
    assert_eq!(a.zones_of(d), vec![(ZoneId(0), vec![0])]);
    fill_pages(&mut a, d, 1);
    assert_eq!(a.zones_of(d), vec![(ZoneId(0), vec![0, 1])]);
    assert!(!a.chunk_guarded(1));
    assert_eq!(zone_data_rows(&a, d), 30);
    assert_eq!(a.stats().expansions, 1);
    clean(&a);
}

#[test]
fn expansion_blocked_by_neighbors() {
    let mut a = ZoneAllocator::new(dram(64), zones_only()).unwrap();
    let d = a.create_domain();
    let e = a.create_domain();
    let f = a.create_domain();
    // four chunks: d takes 0, e the next with free neighbors (2), and f
    // falls back to 1
    fill_pages(&mut a, d, 1);
    fill_pages(&mut a, e, 1);
    fill_pages(&mut a, f, 1);
    assert_eq!(a.zones_of(f)[0].1, vec![1]);
    assert_eq!(a.try_expand_zone(f), None);
    clean(&a);
}

fn three_chunk_zone() -> (ZoneAllocator, DomainId, Vec<PageBlock>) {
    let mut a = ZoneAllocator::new(dram(1024), zones_only()).unwrap();
    let d = a.create_domain();
    let blocks = fill_pages(&mut a, d, (14 + 16 + 16) * 256);
    assert_eq!(a.zones_of(d), vec![(ZoneId(0), vec![0, 1, 2])]);
    (a, d, blocks)
}

fn free_chunk_pages(a: &mut ZoneAllocator, d: DomainId, blocks: &[PageBlock], chunk: u32) {
    for b in blocks {
        if a.chunk_of(b.start).unwrap() == chunk && a.chunk_kind(chunk) != ChunkKind::Free {
            a.free_pages(d, *b).unwrap();
        }
    }
}

#[test]
fn last_chunk_reclaimed() {
    let mut a = ZoneAllocator::new(dram(1024), zones_only()).unwrap();
    let d = a.create_domain();
    let blocks = fill_pages(&mut a, d, 30 * 256);
    assert_eq!(a.zones_of(d)[0].1, vec![0, 1]);
    free_chunk_pages(&mut a, d, &blocks, 1);
    assert_eq!(a.zones_of(d), vec![(ZoneId(0), vec![0])]);
    assert_eq!(a.chunk_kind(1), ChunkKind::Free);
    clean(&a);
}

#[test]
fn interior_chunk_split() {
    let (mut a, d, blocks) = three_chunk_zone();
    // chunk 2's first two rows are freed by emptying chunk 1 first, then
    // its own first rows
    for b in &blocks {
        let (c, s) = a.layout().locate(a.dram(), b.start).unwrap();
        if c == 2 && a.layout().row_of_slot(s) < 2 {
            a.free_pages(d, *b).unwrap();
        }
    }
    free_chunk_pages(&mut a, d, &blocks, 1);
    let zones = a.zones_of(d);
    assert_eq!(zones.len(), 2);
    assert_eq!(zones[0].1, vec![0]);
    assert_eq!(zones[1].1, vec![2]);
    assert!(a.chunk_guarded(0) && a.chunk_guarded(2));
    assert_eq!(a.stats().splits, 1);
    clean(&a);
}

#[test]
fn interior_chunk_kept_while_successor_front_is_used() {
    let (mut a, d, blocks) = three_chunk_zone();
    free_chunk_pages(&mut a, d, &blocks, 1);
    // chunk 1 is empty but chunk 2 has data in its first rows
    assert_eq!(a.zones_of(d), vec![(ZoneId(0), vec![0, 1, 2])]);
    assert_eq!(a.chunk_used(1), 0);
    clean(&a);
}

#[test]
fn first_chunk_shrinks() {
    let (mut a, d, blocks) = three_chunk_zone();
    for b in &blocks {
        let (c, s) = a.layout().locate(a.dram(), b.start).unwrap();
        if c == 1 && a.layout().row_of_slot(s) < 2 {
            a.free_pages(d, *b).unwrap();
        }
    }
    free_chunk_pages(&mut a, d, &blocks, 0);
    assert_eq!(a.zones_of(d), vec![(ZoneId(0), vec![1, 2])]);
    assert!(a.chunk_guarded(1));
    assert_eq!(a.chunk_kind(0), ChunkKind::Free);
    clean(&a);
}

#[test]
fn full_zone_untouched() {
    let (mut a, d, blocks) = three_chunk_zone();
    a.free_pages(d, blocks[20 * 256]).unwrap();
    let b = a.alloc_pages(d, 0).unwrap();
    assert_eq!(b, blocks[20 * 256]);
    a.free_pages(d, b).unwrap();
    assert_eq!(a.zones_of(d), vec![(ZoneId(0), vec![0, 1, 2])]);
    assert_eq!(a.stats().chunks_released, 0);
}

#[test]
fn zonelet_region_layout() {
    let mut a = ZoneAllocator::new(dram(1024), AllocatorParams::default()).unwrap();
    let c = a.provision_zonelet_region().unwrap();
    let u = a.usage();
    assert_eq!(u.loss, 11 * 256);
    assert_eq!(u.stranded, 0);
    assert_eq!(a.layout().stripe_pages[c as usize], 5 * 256);
    // freed again once its last page goes
    let d = a.create_domain();
    let b = a.alloc_pages(d, 0).unwrap();
    assert_eq!(a.chunk_of(b.start).unwrap(), c);
    a.free_pages(d, b).unwrap();
    assert_eq!(a.chunk_kind(c), ChunkKind::Free);
}

#[test]
fn select_frame_resolution() {
    let a = ZoneAllocator::new(dram(1024), AllocatorParams::default()).unwrap();
    assert_eq!(a.select_frame(3, 2 * 256 + 5).unwrap(), Pfn((3 * 16 + 2) * 256 + 5));
    assert!(matches!(
        a.select_frame(3, 256 + 5),
        Err(Error::GuardPosition { chunk: 3, .. })
    ));
    assert!(a.select_frame(3, 16 * 256).is_err());

    let complex = Arc::new(DramConfig::complex().build().unwrap());
    let p = AllocatorParams {
        chunk_rows: 8,
        ..Default::default()
    };
    let a = ZoneAllocator::new(complex.clone(), p).unwrap();
    for chunk in [0u32, 77, 4095] {
        for idx in (2048..8192).step_by(331) {
            let pfn = a.select_frame(chunk, idx).unwrap();
            let row = complex.geometry().page_to_global_row(pfn).unwrap();
            let lrow = a.layout().lrow_pages;
            assert_eq!(complex.grt().logical_of(row), chunk * 8 + (idx / lrow) as u32);
        }
    }
}

#[test]
fn metadata_footprint() {
    let a = ZoneAllocator::new(dram(131_072), AllocatorParams::default()).unwrap();
    let m = a.metadata_size();
    assert_eq!(m.chunk_bitvectors, 4 << 20);
    assert_eq!(m.grt, 256 << 10);
    let target = 4.26e6;
    assert!((m.static_total as f64 - target).abs() / target <= 0.10, "{m:?}");

    let tiny = Arc::new(
        DramConfig {
            geometry: GeometryConfig::tiny(),
            ..Default::default()
        }
        .build()
        .unwrap(),
    );
    let p = AllocatorParams {
        chunk_rows: 4,
        n_guard: 1,
        ..Default::default()
    };
    let a = ZoneAllocator::new(tiny, p).unwrap();
    assert!(a.metadata_size().static_total < 1024);
}

#[test]
fn audit_flags_flipped_bit() {
    let mut a = ZoneAllocator::new(dram(1024), zones_only()).unwrap();
    let d = a.create_domain();
    fill_pages(&mut a, d, 100);
    clean(&a);
    a.chunks[0].occ.toggle(2 * 256 + 500);
    let f = a.audit();
    assert_eq!(f.len(), 1, "{f:#?}");
    assert_eq!(f[0].chunk, Some(0));
    assert_eq!(f[0].check, "occupancy");
}

#[test]
fn audit_flags_non_contiguous_zone() {
    let mut a = ZoneAllocator::new(dram(1024), zones_only()).unwrap();
    let d = a.create_domain();
    fill_pages(&mut a, d, 100);
    let z = a.zones_of(d)[0].0;
    a.free.remove(&9);
    a.chunks[9].kind = ChunkKind::Zone(z);
    a.zones.get_mut(&z).unwrap().chunks.insert(9);
    let f = a.audit();
    assert!(f.iter().any(|x| x.check == "contiguity"), "{f:#?}");
}

#[test]
fn audit_flags_data_in_guard_row() {
    let mut a = ZoneAllocator::new(dram(1024), zones_only()).unwrap();
    let d = a.create_domain();
    fill_pages(&mut a, d, 100);
    a.chunks[0].occ.set(3);
    a.chunks[0].used += 1;
    let f = a.audit();
    assert!(f.iter().any(|x| x.check == "guard" && x.chunk == Some(0)), "{f:#?}");
}

fn hand_zone(a: &mut ZoneAllocator, d: DomainId, chunks: &[u32]) -> ZoneId {
    let z = ZoneId(a.next_zone);
    a.next_zone += 1;
    a.zones.insert(z, Zone { domain: d, chunks: BTreeSet::new() });
    a.domains.get_mut(&d).unwrap().zones.push(z);
    for &c in chunks {
        a.attach(c, z, true);
    }
    z
}

#[test]
fn complex_expansion_into_three_neighbor_chunk() {
    let complex = Arc::new(DramConfig::complex().build().unwrap());
    let p = AllocatorParams {
        chunk_rows: 8,
        zonelets_enabled: false,
        ..Default::default()
    };
    let mut a = ZoneAllocator::new(complex, p).unwrap();
    let lay = a.layout().clone();
    // a three-neighbor chunk with a neighbor that is not beneath it
    let c = (0..lay.n_chunks)
        .find(|&c| {
            let i = c as usize;
            lay.neighbors[i].len() == 3
                && !lay.below[i].is_empty()
                && lay.neighbors[i].iter().any(|n| !lay.below[i].contains(n))
        })
        .expect("default transforms have such a chunk");
    let below = lay.below[c as usize].clone();
    let foreign: Vec<u32> = lay.neighbors[c as usize]
        .iter()
        .copied()
        .filter(|n| !below.contains(n))
        .collect();

    let d = a.create_domain();
    let e = a.create_domain();
    let f = a.create_domain();
    let zd = hand_zone(&mut a, d, &below);
    hand_zone(&mut a, e, &foreign);
    // park every other candidate with a third domain
    while let Some((_, x, _)) = a.expansion_candidate(d) {
        if x == c {
            break;
        }
        hand_zone(&mut a, f, &[x]);
    }
    assert_eq!(a.try_expand_zone(d), Some((zd, c)));
    assert!(!a.chunk_guarded(c));
    for n in foreign {
        assert_eq!(a.owner_of_chunk(n), Some(e));
    }
}

#[test]
fn complex_expansion_takes_free_chunks_beneath() {
    let complex = Arc::new(DramConfig::complex().build().unwrap());
    let p = AllocatorParams {
        chunk_rows: 8,
        zonelets_enabled: false,
        ..Default::default()
    };
    let mut a = ZoneAllocator::new(complex, p).unwrap();
    let lay = a.layout().clone();
    let c = (0..lay.n_chunks)
        .find(|&c| lay.below[c as usize].len() == 2)
        .expect("a chunk with two chunks beneath");
    let below: Vec<u32> = lay.below[c as usize].iter().copied().collect();
    let d = a.create_domain();
    let f = a.create_domain();
    let zd = hand_zone(&mut a, d, &below[..1]);
    while let Some((_, x, _)) = a.expansion_candidate(d) {
        if x == c {
            break;
        }
        hand_zone(&mut a, f, &[x]);
    }
    let (z, x, extra) = a.expansion_candidate(d).unwrap();
    assert_eq!((z, x, extra.clone()), (zd, c, below[1..].to_vec()));
    a.try_expand_zone(d).unwrap();
    assert!(!a.chunk_guarded(c));
    assert!(a.chunk_guarded(below[1]));
    assert_eq!(a.chunk_kind(below[1]), ChunkKind::Zone(zd));
    assert_eq!(a.stats().expansion_extra_chunks, 1);
    // the hand-built zones are empty, so only the fixpoint check may complain
    assert!(a.audit().iter().all(|f| f.check == "fixpoint"), "{:#?}", a.audit());

    // a foreign chunk beneath blocks it
    let mut b = ZoneAllocator::new(a.dram().clone(), a.params().clone()).unwrap();
    let d = b.create_domain();
    let e = b.create_domain();
    hand_zone(&mut b, d, &below[..1]);
    hand_zone(&mut b, e, &below[1..]);
    assert!(b.expansion_candidate(d).is_none_or(|(_, x, _)| x != c));
}
