//! Synthetic workload mixes: applications drawn from footprint classes,
//! short-lived background processes, optional page-table stand-ins.

use std::collections::BTreeMap;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use super::trace::{Action, TraceEvent};
use crate::error::{Error, Result};

const PAGES_PER_MIB: f64 = 256.0;

/// Order of a 2 MiB transparent huge page.
pub const HUGE_ORDER: u32 = 9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppClass {
    pub name: String,
    pub count: u32,
    pub min_mib: f64,
    pub max_mib: f64,
}

impl AppClass {
    pub fn new(name: &str, count: u32, min_mib: f64, max_mib: f64) -> Self {
        AppClass {
            name: name.into(),
            count,
            min_mib,
            max_mib,
        }
    }

    pub fn spec_small(count: u32) -> Self {
        AppClass::new("spec-s", count, 2.0, 250.0)
    }

    pub fn spec_medium(count: u32) -> Self {
        AppClass::new("spec-m", count, 250.0, 750.0)
    }

    pub fn spec_large(count: u32) -> Self {
        AppClass::new("spec-l", count, 750.0, 1230.0)
    }

    pub fn gap_small(count: u32) -> Self {
        AppClass::new("gap-1g", count, 1126.0, 1126.0)
    }

    pub fn gap_large(count: u32) -> Self {
        AppClass::new("gap-8g", count, 8192.0, 8192.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixSpec {
    pub apps: Vec<AppClass>,
    pub background: u32,
    pub background_mean_mib: f64,
    /// Each application of K MiB also runs K/2 one-page domains.
    pub page_tables: bool,
    /// Fraction of a footprint freed and reallocated per churn cycle.
    pub churn_min: f64,
    pub churn_max: f64,
    pub cycles: u32,
    /// Ramp-up and drain each take about this many events per process.
    pub ramp_steps: u32,
    /// Smallest ramp-up or drain event, in pages.
    pub batch_pages: u64,
    /// Share of each application footprint held as huge pages.
    pub huge_fraction: f64,
    /// Footprints shrink by this factor. Pair it with global rows and a
    /// switch threshold shrunk by the same factor to model a full-size
    /// machine with fewer pages per row.
    pub scale: u32,
    pub restart: bool,
    /// Event budget; once reached, nothing restarts and everything drains.
    pub max_events: u64,
    pub seed: u64,
}

impl Default for MixSpec {
    fn default() -> Self {
        MixSpec {
            apps: Vec::new(),
            background: 0,
            background_mean_mib: 4.9,
            page_tables: false,
            churn_min: 0.01,
            churn_max: 0.10,
            cycles: 32,
            ramp_steps: 16,
            batch_pages: 64,
            huge_fraction: 0.0,
            scale: 1,
            restart: true,
            max_events: 1_000_000,
            seed: 0,
        }
    }
}

impl MixSpec {
    pub fn validate(&self) -> Result<()> {
        for a in &self.apps {
            if !(a.min_mib > 0.0 && a.max_mib >= a.min_mib && a.max_mib.is_finite()) {
                return Err(Error::config(
                    "apps.min_mib",
                    format!("class `{}` needs 0 < min_mib <= max_mib", a.name),
                ));
            }
        }
        if self.background > 0 && !(self.background_mean_mib > 0.0 && self.background_mean_mib.is_finite()) {
            return Err(Error::config("background_mean_mib", "must be positive"));
        }
        if !(0.0 < self.churn_min && self.churn_min <= self.churn_max && self.churn_max <= 1.0) {
            return Err(Error::config("churn_min", "need 0 < churn_min <= churn_max <= 1"));
        }
        if self.batch_pages == 0 {
            return Err(Error::config("batch_pages", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.huge_fraction) {
            return Err(Error::config("huge_fraction", "must lie in [0, 1]"));
        }
        if self.scale == 0 {
            return Err(Error::config("scale", "must be positive"));
        }
        if self.ramp_steps == 0 {
            return Err(Error::config("ramp_steps", "must be positive"));
        }
        Ok(())
    }

    /// Expected pages live at once if every process sits at its mean
    /// footprint.
    pub fn mean_demand_pages(&self) -> f64 {
        let per_mib = self.pages_per_mib();
        let apps: f64 = self
            .apps
            .iter()
            .map(|a| a.count as f64 * (a.min_mib + a.max_mib) / 2.0 * per_mib)
            .sum();
        let pt = if self.page_tables { apps / 512.0 } else { 0.0 };
        apps + pt + self.background as f64 * self.background_mean_mib * per_mib
    }

    pub fn pages_per_mib(&self) -> f64 {
        PAGES_PER_MIB / self.scale as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Spawn,
    Ramp,
    Steady,
    Drain,
}

/// Blocks of one order a process holds.
#[derive(Clone, Copy, Debug)]
struct Part {
    order: u32,
    target: u64,
    live: u64,
}

#[derive(Clone, Debug)]
struct Proc {
    dom: u32,
    /// index into `apps`, or `None` for background
    class: Option<usize>,
    footprint: u64,
    parts: Vec<Part>,
    phase: Phase,
    cycles_left: u32,
    children: Vec<u32>,
}

struct Gen<'a> {
    spec: &'a MixSpec,
    rng: ChaCha8Rng,
    next_dom: u32,
    events: Vec<TraceEvent>,
    t: u64,
}

impl Gen<'_> {
    fn footprint(&mut self, class: Option<usize>) -> u64 {
        let mib = match class {
            Some(i) => {
                let a = &self.spec.apps[i];
                if a.max_mib > a.min_mib {
                    self.rng.gen_range(a.min_mib..=a.max_mib)
                } else {
                    a.min_mib
                }
            }
            None => Exp::new(1.0 / self.spec.background_mean_mib)
                .expect("validated mean")
                .sample(&mut self.rng),
        };
        ((mib * self.spec.pages_per_mib()).ceil() as u64).max(1)
    }

    fn new_proc(&mut self, class: Option<usize>) -> Proc {
        let dom = self.next_dom;
        self.next_dom += 1;
        let footprint = self.footprint(class);
        let huge = if class.is_some() {
            (footprint as f64 * self.spec.huge_fraction) as u64 >> HUGE_ORDER
        } else {
            0
        };
        let mut parts = vec![Part {
            order: 0,
            target: footprint - (huge << HUGE_ORDER),
            live: 0,
        }];
        if huge > 0 {
            parts.push(Part {
                order: HUGE_ORDER,
                target: huge,
                live: 0,
            });
        }
        parts.retain(|p| p.target > 0);
        Proc {
            dom,
            class,
            footprint,
            parts,
            phase: Phase::Spawn,
            cycles_left: self.spec.cycles,
            children: Vec::new(),
        }
    }

    /// Blocks per ramp-up or drain event.
    fn batch(&self, part: &Part) -> u64 {
        let min = (self.spec.batch_pages >> part.order).max(1);
        part.target.div_ceil(self.spec.ramp_steps as u64).max(min)
    }

    fn emit(&mut self, ev: TraceEvent) {
        self.events.push(ev);
    }

    /// Advances one process by one step. Returns false once it has exited.
    fn step(&mut self, p: &mut Proc, winding_down: bool) -> bool {
        let t = self.t;
        if winding_down && matches!(p.phase, Phase::Ramp | Phase::Steady) {
            p.phase = Phase::Drain;
        }
        match p.phase {
            Phase::Spawn => {
                self.emit(TraceEvent::spawn(t, p.dom, None));
                if self.spec.page_tables && p.class.is_some() {
                    // a page-table page maps 2 MiB
                    let k = p.footprint / 512;
                    for _ in 0..k {
                        let c = self.next_dom;
                        self.next_dom += 1;
                        self.emit(TraceEvent::spawn(t, c, Some(p.dom)));
                        self.emit(TraceEvent::alloc(t, c, 0, 1));
                        p.children.push(c);
                    }
                }
                p.phase = if winding_down { Phase::Drain } else { Phase::Ramp };
            }
            Phase::Ramp => {
                for i in 0..p.parts.len() {
                    let part = p.parts[i];
                    let n = self.batch(&part).min(part.target - part.live);
                    if n > 0 {
                        self.emit(TraceEvent::alloc(t, p.dom, part.order, n));
                        p.parts[i].live += n;
                    }
                }
                if p.parts.iter().all(|x| x.live == x.target) {
                    p.phase = Phase::Steady;
                }
            }
            Phase::Steady => {
                if p.cycles_left == 0 {
                    p.phase = Phase::Drain;
                    return self.step(p, winding_down);
                }
                let frac = self.rng.gen_range(self.spec.churn_min..=self.spec.churn_max);
                for part in &p.parts {
                    let n = ((frac * part.target as f64).round() as u64).clamp(1, part.live);
                    self.events.push(TraceEvent::free(t, p.dom, part.order, n));
                    self.events.push(TraceEvent::alloc(t, p.dom, part.order, n));
                }
                p.cycles_left -= 1;
            }
            Phase::Drain => {
                for i in 0..p.parts.len() {
                    let part = p.parts[i];
                    let n = self.batch(&part).min(part.live);
                    if n > 0 {
                        self.emit(TraceEvent::free(t, p.dom, part.order, n));
                        p.parts[i].live -= n;
                    }
                }
                if p.parts.iter().all(|x| x.live == 0) {
                    for c in std::mem::take(&mut p.children) {
                        self.emit(TraceEvent::free(t, c, 0, 1));
                        self.emit(TraceEvent::exit(t, c));
                    }
                    self.emit(TraceEvent::exit(t, p.dom));
                    return false;
                }
            }
        }
        true
    }
}

/// Deterministic trace for `spec`: the same spec and seed always give the
/// same events.
pub fn generate_mix(spec: &MixSpec) -> Result<Vec<TraceEvent>> {
    spec.validate()?;
    let mut g = Gen {
        spec,
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        next_dom: 0,
        events: Vec::new(),
        t: 0,
    };
    let mut procs: Vec<Proc> = Vec::new();
    for (i, a) in spec.apps.iter().enumerate() {
        for _ in 0..a.count {
            let p = g.new_proc(Some(i));
            procs.push(p);
        }
    }
    for _ in 0..spec.background {
        let p = g.new_proc(None);
        procs.push(p);
    }
    procs.shuffle(&mut g.rng);

    while !procs.is_empty() {
        let winding_down = g.events.len() as u64 >= spec.max_events;
        let i = g.rng.gen_range(0..procs.len());
        let mut p = procs.swap_remove(i);
        if g.step(&mut p, winding_down) {
            procs.push(p);
        } else if spec.restart && !winding_down {
            let fresh = g.new_proc(p.class);
            procs.push(fresh);
        }
        g.t += 1;
    }
    Ok(g.events)
}

/// Warns when the mix asks for more than `total_pages` on average.
pub fn check_feasibility(spec: &MixSpec, total_pages: u64) -> Option<String> {
    let demand = spec.mean_demand_pages();
    (demand > total_pages as f64).then(|| {
        let msg = format!(
            "mix demands about {:.0} pages on average, memory holds {total_pages}",
            demand
        );
        warn!("{msg}");
        msg
    })
}

/// Largest number of pages each domain ever held.
pub fn peak_footprints(trace: &[TraceEvent]) -> BTreeMap<u32, u64> {
    let mut live: BTreeMap<u32, u64> = BTreeMap::new();
    let mut peak: BTreeMap<u32, u64> = BTreeMap::new();
    for ev in trace {
        let l = live.entry(ev.dom).or_insert(0);
        match ev.act {
            Action::Alloc => *l += ev.pages(),
            Action::Free => *l -= ev.pages(),
            _ => {}
        }
        let p = peak.entry(ev.dom).or_insert(0);
        *p = (*p).max(*l);
    }
    peak
}
