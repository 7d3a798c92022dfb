//! Overhead accounting: capacity loss, stranding, and their time averages.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where every page of memory currently stands.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageUsage {
    pub allocated: u64,
    /// guard rows, zonelet guard stripes and remainder rows
    pub loss: u64,
    /// reserved by a zone but not allocated
    pub stranded: u64,
    pub free: u64,
}

impl PageUsage {
    pub fn total(&self) -> u64 {
        self.allocated + self.loss + self.stranded + self.free
    }

    pub fn overhead(&self) -> u64 {
        self.loss + self.stranded
    }
}

/// One timeline sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub tick: u64,
    pub allocated: u64,
    pub loss: u64,
    pub stranded: u64,
    pub free: u64,
}

impl MetricsSnapshot {
    pub fn new(tick: u64, u: PageUsage) -> Self {
        MetricsSnapshot {
            tick,
            allocated: u.allocated,
            loss: u.loss,
            stranded: u.stranded,
            free: u.free,
        }
    }

    pub fn usage(&self) -> PageUsage {
        PageUsage {
            allocated: self.allocated,
            loss: self.loss,
            stranded: self.stranded,
            free: self.free,
        }
    }

    pub fn total(&self) -> u64 {
        self.usage().total()
    }

    pub fn overhead(&self) -> u64 {
        self.loss + self.stranded
    }

    pub fn overhead_vs_requested(&self) -> f64 {
        ratio(self.overhead(), self.allocated)
    }

    pub fn overhead_vs_total(&self) -> f64 {
        ratio(self.overhead(), self.total())
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub samples: usize,
    pub avg_overhead_vs_requested: f64,
    pub avg_overhead_vs_total: f64,
    pub peak_overhead_vs_requested: f64,
    pub peak_overhead_vs_total: f64,
    pub avg_loss_vs_total: f64,
    pub avg_stranded_vs_total: f64,
    pub avg_loss_vs_requested: f64,
    pub avg_stranded_vs_requested: f64,
    pub avg_loss_pages: f64,
    pub avg_stranded_pages: f64,
    pub avg_allocated_pages: f64,
    pub supported: bool,
    pub failed_requests: u64,
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Time-averaged and peak overheads. Ratios against requested memory skip
/// samples with nothing allocated.
pub fn summarize(timeline: &[MetricsSnapshot], failed_requests: u64) -> Result<Summary> {
    if timeline.is_empty() {
        return Err(Error::config("timeline", "cannot summarize an empty timeline"));
    }
    let busy = || timeline.iter().filter(|s| s.allocated > 0);
    let peak = |f: fn(&MetricsSnapshot) -> f64| timeline.iter().map(f).fold(0.0, f64::max);
    Ok(Summary {
        samples: timeline.len(),
        avg_overhead_vs_requested: mean(busy().map(|s| s.overhead_vs_requested())),
        avg_overhead_vs_total: mean(timeline.iter().map(|s| s.overhead_vs_total())),
        peak_overhead_vs_requested: peak(|s| s.overhead_vs_requested()),
        peak_overhead_vs_total: peak(|s| s.overhead_vs_total()),
        avg_loss_vs_total: mean(timeline.iter().map(|s| ratio(s.loss, s.total()))),
        avg_stranded_vs_total: mean(timeline.iter().map(|s| ratio(s.stranded, s.total()))),
        avg_loss_vs_requested: mean(busy().map(|s| ratio(s.loss, s.allocated))),
        avg_stranded_vs_requested: mean(busy().map(|s| ratio(s.stranded, s.allocated))),
        avg_loss_pages: mean(timeline.iter().map(|s| s.loss as f64)),
        avg_stranded_pages: mean(timeline.iter().map(|s| s.stranded as f64)),
        avg_allocated_pages: mean(timeline.iter().map(|s| s.allocated as f64)),
        supported: failed_requests == 0,
        failed_requests,
    })
}

pub const CSV_HEADER: &str =
    "tick,allocated,loss,stranded,free,overhead_vs_requested,overhead_vs_total";

pub fn write_csv<W: Write>(timeline: &[MetricsSnapshot], mut w: W) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for s in timeline {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            s.tick,
            s.allocated,
            s.loss,
            s.stranded,
            s.free,
            s.overhead_vs_requested(),
            s.overhead_vs_total()
        )?;
    }
    Ok(())
}

pub fn read_csv<R: BufRead>(r: R) -> Result<Vec<MetricsSnapshot>> {
    let mut lines = r.lines();
    let header = lines.next().transpose()?;
    if header.as_deref().map(str::trim_end) != Some(CSV_HEADER) {
        return Err(Error::Trace {
            line: 1,
            reason: format!("expected header `{CSV_HEADER}`"),
        });
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let bad = |reason: String| Error::Trace { line: i + 2, reason };
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 7 {
            return Err(bad(format!("expected 7 fields, got {}", f.len())));
        }
        let num = |k: usize| {
            f[k].parse::<u64>()
                .map_err(|e| bad(format!("field {k}: {e}")))
        };
        out.push(MetricsSnapshot {
            tick: num(0)?,
            allocated: num(1)?,
            loss: num(2)?,
            stranded: num(3)?,
            free: num(4)?,
        });
    }
    Ok(out)
}

pub fn write_json<W: Write, T: Serialize>(value: &T, w: W) -> Result<()> {
    serde_json::to_writer_pretty(w, value)?;
    Ok(())
}
