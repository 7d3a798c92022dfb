//! Drives an allocator with a trace and samples its overheads.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::trace::{Action, TraceEvent, Validator};
use crate::alloc::{Mode, PageAllocator};
use crate::dram::Dram;
use crate::error::{Error, Result};
use crate::metrics::{MetricsSnapshot, PageUsage};
use crate::modes::Machine;
use crate::types::{DomainId, PageBlock};
use crate::verifier::{check_exclusive, check_isolation, ViolationReport};

#[derive(Clone, Debug, Serialize)]
pub struct ReplayConfig {
    /// Ticks between timeline samples.
    pub sample_interval: u64,
    /// Events between isolation checks and audits; 0 checks only at the end.
    pub verify_every: u64,
    pub verify: bool,
    /// Seeds the choice of which live blocks a `free` releases.
    pub seed: u64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig {
            sample_interval: 1000,
            verify_every: 0,
            verify: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ReplayOutcome {
    pub mode: Mode,
    pub timeline: Vec<MetricsSnapshot>,
    /// Page requests that could not be served.
    pub failed_requests: u64,
    pub first_failure: Option<String>,
    pub events: u64,
    /// Samples whose page classes did not add up to total memory.
    pub conservation_failures: u64,
    /// Worst guard loss of any single zone chunk seen at a sample.
    pub max_zone_chunk_loss: f64,
    pub checks: u64,
    pub report: ViolationReport,
}

impl ReplayOutcome {
    pub fn supported(&self) -> bool {
        self.failed_requests == 0
    }
}

/// Page-table stand-ins under siloz are not placed. Their pages and two
/// guard rows per parent are charged to the metrics instead.
#[derive(Clone, Debug, Default)]
struct PtLedger {
    parent: BTreeMap<u32, u32>,
    pages: BTreeMap<u32, u64>,
    per_parent: BTreeMap<u32, u64>,
    guard_pages: u64,
}

impl PtLedger {
    fn total(&self) -> u64 {
        self.pages.values().sum()
    }

    fn charged(&self) -> (u64, u64) {
        let parents = self.per_parent.values().filter(|&&n| n > 0).count() as u64;
        (self.total(), parents * self.guard_pages)
    }

    fn adjust(&self, mut u: PageUsage) -> PageUsage {
        let (alloc, loss) = self.charged();
        u.allocated += alloc;
        u.loss += loss;
        u.free -= alloc + loss;
        u
    }

    /// Extra free pages charging `pages` more to `dom` would consume.
    fn cost(&self, dom: u32, pages: u64) -> u64 {
        let p = self.parent[&dom];
        let fresh = self.per_parent.get(&p).copied().unwrap_or(0) == 0;
        pages + if fresh { self.guard_pages } else { 0 }
    }

    fn add(&mut self, dom: u32, pages: i64) {
        let p = self.parent[&dom];
        let e = self.pages.entry(dom).or_insert(0);
        *e = (*e as i64 + pages) as u64;
        let q = self.per_parent.entry(p).or_insert(0);
        *q = (*q as i64 + pages) as u64;
    }
}

struct Run<'a> {
    machine: &'a mut Machine,
    dram: &'a Dram,
    rng: ChaCha8Rng,
    doms: BTreeMap<u32, DomainId>,
    /// live blocks per (trace domain, order)
    live: BTreeMap<(u32, u32), Vec<PageBlock>>,
    pt: Option<PtLedger>,
    out: ReplayOutcome,
}

impl Run<'_> {
    fn usage(&self) -> PageUsage {
        let u = self.machine.usage();
        match &self.pt {
            Some(pt) => pt.adjust(u),
            None => u,
        }
    }

    fn sample(&mut self, tick: u64) {
        let u = self.usage();
        if u.total() != self.machine.total_pages() {
            self.out.conservation_failures += 1;
        }
        if let Some(z) = self.machine.zones() {
            self.out.max_zone_chunk_loss = self.out.max_zone_chunk_loss.max(z.max_zone_chunk_loss());
        }
        self.out.timeline.push(MetricsSnapshot::new(tick, u));
    }

    fn fail(&mut self, what: String) {
        self.out.failed_requests += 1;
        if self.out.first_failure.is_none() {
            self.out.first_failure = Some(what);
        }
    }

    fn verify(&mut self) {
        let blocks = self.live.iter().flat_map(|(&(dom, _), v)| {
            let d = self.doms[&dom];
            v.iter().map(move |b| (d, *b))
        });
        let mut r = check_isolation(self.dram, self.machine.isolation_radius(), blocks.clone());
        if let Some(rows) = self.machine.exclusive_chunk_rows() {
            r.findings.extend(check_exclusive(self.dram, rows, blocks));
        }
        r.findings.extend(self.machine.audit());
        self.out.checks += 1;
        self.out.report.merge(r);
    }

    fn free_chunks(&self) -> usize {
        self.machine.zones().map_or(0, |z| z.free_chunks())
    }

    /// True once real allocations have eaten into pages charged to
    /// page-table stand-ins.
    fn overcharged(&self) -> bool {
        self.pt.as_ref().is_some_and(|pt| {
            let (alloc, loss) = pt.charged();
            self.machine.usage().free < alloc + loss
        })
    }

    fn is_virtual(&self, dom: u32) -> bool {
        self.pt.as_ref().is_some_and(|pt| pt.parent.contains_key(&dom))
    }

    fn apply(&mut self, ev: &TraceEvent) -> Result<()> {
        match ev.act {
            Action::Spawn => {
                if let (Some(pt), Some(p)) = (self.pt.as_mut(), ev.parent) {
                    pt.parent.insert(ev.dom, p);
                    return Ok(());
                }
                let d = self.machine.create_domain();
                self.doms.insert(ev.dom, d);
            }
            Action::Alloc if self.is_virtual(ev.dom) => {
                let pt = self.pt.as_ref().expect("virtual implies ledger");
                let need = pt.cost(ev.dom, ev.pages());
                if self.usage().free < need {
                    self.fail(format!("t={} dom={}: page-table charge of {} pages", ev.t, ev.dom, ev.pages()));
                } else {
                    self.pt.as_mut().expect("ledger").add(ev.dom, ev.pages() as i64);
                }
            }
            Action::Free | Action::Exit if self.is_virtual(ev.dom) => {
                let pt = self.pt.as_mut().expect("ledger");
                let held = pt.pages.get(&ev.dom).copied().unwrap_or(0);
                let n = if ev.act == Action::Exit { held } else { ev.pages().min(held) };
                pt.add(ev.dom, -(n as i64));
                if ev.act == Action::Exit {
                    pt.pages.remove(&ev.dom);
                }
            }
            Action::Alloc => {
                let d = self.doms[&ev.dom];
                for i in 0..ev.n {
                    let before = self.free_chunks();
                    match self.machine.alloc_pages(d, ev.order) {
                        Ok(b) if self.free_chunks() < before && self.overcharged() => {
                            // the new chunk came out of memory already charged to page tables
                            self.machine.free_pages(d, b)?;
                            self.fail(format!("t={} dom={}: memory held by page tables", ev.t, ev.dom));
                            self.out.failed_requests += ev.n - i - 1;
                            break;
                        }
                        Ok(b) => self.live.entry((ev.dom, ev.order)).or_default().push(b),
                        Err(e @ (Error::OutOfMemory { .. } | Error::OrderTooLarge { .. })) => {
                            // the rest of the batch would fail the same way
                            self.fail(format!("t={} dom={}: {e}", ev.t, ev.dom));
                            self.out.failed_requests += ev.n - i - 1;
                            break;
                        }
                        Err(e) => return Err(e),
                    }
                }
            }
            Action::Free => {
                let d = self.doms[&ev.dom];
                for _ in 0..ev.n {
                    // fewer blocks than requested only after a failed alloc
                    let Some(list) = self.live.get_mut(&(ev.dom, ev.order)) else {
                        break;
                    };
                    if list.is_empty() {
                        break;
                    }
                    let i = self.rng.gen_range(0..list.len());
                    let b = list.swap_remove(i);
                    self.machine.free_pages(d, b)?;
                }
            }
            Action::Exit => {
                let d = self.doms.remove(&ev.dom).expect("validated spawn");
                let keys: Vec<_> = self.live.range((ev.dom, 0)..=(ev.dom, u32::MAX)).map(|(k, _)| *k).collect();
                for k in keys {
                    for b in self.live.remove(&k).unwrap_or_default() {
                        self.machine.free_pages(d, b)?;
                    }
                }
                self.machine.destroy_domain(d)?;
            }
        }
        Ok(())
    }
}

/// Replays `trace` on `machine`. Out-of-memory requests are skipped and
/// counted; ownership errors abort since they mean corrupted state.
pub fn replay(
    trace: &[TraceEvent],
    machine: &mut Machine,
    dram: &Dram,
    cfg: &ReplayConfig,
) -> Result<ReplayOutcome> {
    let mode = machine.mode();
    let pt = (mode == Mode::Siloz).then(|| PtLedger {
        guard_pages: 2 * dram.pages_per_row(),
        ..PtLedger::default()
    });
    let mut run = Run {
        machine,
        dram,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        doms: BTreeMap::new(),
        live: BTreeMap::new(),
        pt,
        out: ReplayOutcome {
            mode,
            timeline: Vec::new(),
            failed_requests: 0,
            first_failure: None,
            events: 0,
            conservation_failures: 0,
            max_zone_chunk_loss: 0.0,
            checks: 0,
            report: ViolationReport::default(),
        },
    };
    let interval = cfg.sample_interval.max(1);
    let mut validator = Validator::default();
    run.sample(0);
    let mut next_sample = interval;
    let mut last_t = 0;
    for (i, ev) in trace.iter().enumerate() {
        validator.check(i + 1, ev)?;
        while ev.t >= next_sample {
            run.sample(next_sample);
            next_sample += interval;
        }
        run.apply(ev).map_err(|e| match e {
            Error::Ownership { .. } => Error::Trace {
                line: i + 1,
                reason: format!("allocator state corrupted: {e}"),
            },
            e => e,
        })?;
        run.out.events += 1;
        last_t = ev.t;
        if cfg.verify && cfg.verify_every > 0 && run.out.events % cfg.verify_every == 0 {
            run.verify();
        }
    }
    run.sample(last_t + 1);
    if cfg.verify {
        run.verify();
    }
    Ok(run.out)
}
