use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use rowguard::alloc::{AllocatorParams, Mode};
use rowguard::config::AllocatorSection;
use rowguard::dram::neighbors::neighbor_histogram;
use rowguard::metrics::{self, Summary};
use rowguard::workload::{generate_mix, write_trace, ReplayOutcome};
use serde::Serialize;

use crate::setup::{env_seed, read_mix, Setup};
use crate::{
    Axis, GenTraceArgs, GrtArgs, ReportArgs, SimulateArgs, SweepArgs, VerifyArgs, EXIT_SECURITY,
    EXIT_UNSUPPORTED,
};

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    let f = fs::File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    metrics::write_json(value, &mut w)?;
    writeln!(w)?;
    Ok(())
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = io::stdout().lock();
    metrics::write_json(value, &mut out)?;
    writeln!(out)?;
    Ok(())
}

pub fn gen_trace(a: &GenTraceArgs) -> Result<u8> {
    let mut spec = read_mix(&a.spec)?;
    if let Some(s) = a.seed.or(env_seed()?) {
        spec.seed = s;
    }
    let tr = generate_mix(&spec)?;
    match &a.out {
        Some(p) => {
            let mut w = create(p)?;
            write_trace(&tr, &mut w)?;
            w.flush()?;
        }
        None => write_trace(&tr, io::stdout().lock())?,
    }
    log::info!("wrote {} events", tr.len());
    Ok(0)
}

#[derive(Serialize)]
struct SimulateReport<'a> {
    mode: Mode,
    params: &'a AllocatorParams,
    seed: Option<u64>,
    events: u64,
    summary: &'a Summary,
    first_failure: &'a Option<String>,
    conservation_failures: u64,
    max_zone_chunk_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    violations: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    findings: Option<usize>,
}

pub fn simulate(a: &SimulateArgs) -> Result<u8> {
    let s = Setup::new(&a.run)?;
    let mut rc = s.replay_config();
    rc.verify |= a.verify;
    let (out, summary) = s.run(&s.params, &rc)?;
    let report = SimulateReport {
        mode: s.params.mode,
        params: &s.params,
        seed: s.cfg.seed,
        events: out.events,
        summary: &summary,
        first_failure: &out.first_failure,
        conservation_failures: out.conservation_failures,
        max_zone_chunk_loss: out.max_zone_chunk_loss,
        violations: rc.verify.then_some(out.report.violations),
        findings: rc.verify.then_some(out.report.findings.len()),
    };
    let dir = a.out.clone().or_else(|| s.cfg.output.dir.clone());
    if let Some(dir) = dir {
        let mut w = create(&dir.join("timeline.csv"))?;
        metrics::write_csv(&out.timeline, &mut w)?;
        w.flush()?;
        write_json_file(&dir.join("summary.json"), &report)?;
    }
    print_json(&report)?;
    if rc.verify && !out.report.is_clean() {
        return Ok(EXIT_SECURITY);
    }
    if out.conservation_failures > 0 {
        eprintln!("{} samples broke page conservation", out.conservation_failures);
        return Ok(EXIT_SECURITY);
    }
    if a.strict && !summary.supported {
        eprintln!(
            "{} request(s) could not be served; first: {}",
            summary.failed_requests,
            out.first_failure.as_deref().unwrap_or("?")
        );
        return Ok(EXIT_UNSUPPORTED);
    }
    Ok(0)
}

#[derive(Serialize)]
struct Row {
    label: String,
    supported: bool,
    failed_requests: u64,
    overhead_vs_total: f64,
    loss_vs_total: f64,
    stranded_vs_total: f64,
    overhead_vs_requested: f64,
}

impl Row {
    fn new(label: String, s: &Summary) -> Self {
        Row {
            label,
            supported: s.supported,
            failed_requests: s.failed_requests,
            overhead_vs_total: s.avg_overhead_vs_total,
            loss_vs_total: s.avg_loss_vs_total,
            stranded_vs_total: s.avg_stranded_vs_total,
            overhead_vs_requested: s.avg_overhead_vs_requested,
        }
    }
}

fn print_table(first: &str, rows: &[Row]) {
    println!(
        "{first:<12} {:>9} {:>10} {:>9} {:>9} {:>9} {:>9}",
        "supported", "failed", "ovh/total", "loss", "stranded", "ovh/req"
    );
    for r in rows {
        println!(
            "{:<12} {:>9} {:>10} {:>8.2}% {:>8.2}% {:>8.2}% {:>8.2}%",
            r.label,
            if r.supported { "yes" } else { "no" },
            r.failed_requests,
            100.0 * r.overhead_vs_total,
            100.0 * r.loss_vs_total,
            100.0 * r.stranded_vs_total,
            100.0 * r.overhead_vs_requested
        );
    }
}

fn run_all(s: &Setup, runs: Vec<(String, AllocatorParams)>) -> Result<Vec<Row>> {
    let rc = s.replay_config();
    let done: Vec<Result<(String, ReplayOutcome, Summary)>> = runs
        .into_par_iter()
        .map(|(label, p)| {
            let (out, sum) = s.run(&p, &rc)?;
            Ok((label, out, sum))
        })
        .collect();
    let mut rows = Vec::new();
    for r in done {
        let (label, out, sum) = r?;
        if out.conservation_failures > 0 {
            bail!("{label}: {} samples broke page conservation", out.conservation_failures);
        }
        rows.push(Row::new(label, &sum));
    }
    Ok(rows)
}

pub fn sweep(a: &SweepArgs) -> Result<u8> {
    let s = Setup::new(&a.run)?;
    let mut runs = Vec::new();
    for &v in &a.values {
        let mut p = s.params.clone();
        match a.axis {
            Axis::ChunkRows => p.chunk_rows = v,
            Axis::NGuard => p.n_guard = v,
        }
        if p.mode != Mode::Buddy {
            p.validate(&s.dram)?;
        }
        runs.push((v.to_string(), p));
    }
    let rows = run_all(&s, runs)?;
    let head = match a.axis {
        Axis::ChunkRows => "chunk_rows",
        Axis::NGuard => "n_guard",
    };
    print_table(head, &rows);
    if let Some(p) = &a.out {
        write_json_file(p, &rows)?;
    }
    Ok(0)
}

pub fn report(a: &ReportArgs) -> Result<u8> {
    let s = Setup::new(&a.run)?;
    let mut runs = Vec::new();
    for &m in &a.modes {
        let sec = AllocatorSection {
            mode: Some(m),
            ..s.cfg.allocator.clone()
        };
        runs.push((m.to_string(), sec.params(&s.dram)?));
    }
    let rows = run_all(&s, runs)?;
    print_table("mode", &rows);
    if let Some(p) = &a.out {
        write_json_file(p, &rows)?;
    }
    Ok(0)
}

pub fn verify(a: &VerifyArgs) -> Result<u8> {
    let s = Setup::new(&a.run)?;
    let mut rc = s.replay_config();
    rc.verify = true;
    rc.verify_every = a.every;
    let (out, _) = s.run(&s.params, &rc)?;
    #[derive(Serialize)]
    struct VerifyReport<'a> {
        mode: Mode,
        n_guard: u32,
        events: u64,
        checks: u64,
        clean: bool,
        report: &'a rowguard::verifier::ViolationReport,
    }
    let rep = VerifyReport {
        mode: s.params.mode,
        n_guard: s.params.n_guard,
        events: out.events,
        checks: out.checks,
        clean: out.report.is_clean(),
        report: &out.report,
    };
    match &a.out {
        Some(p) => write_json_file(p, &rep)?,
        None => print_json(&rep)?,
    }
    if rep.clean {
        Ok(0)
    } else {
        eprintln!(
            "{} violation(s), {} audit finding(s)",
            out.report.violations,
            out.report.findings.len()
        );
        Ok(EXIT_SECURITY)
    }
}

pub fn grt(a: &GrtArgs) -> Result<u8> {
    let cfg = crate::setup::resolve(&a.run)?;
    let dram = cfg.build_dram()?;
    let grt = dram.grt();
    match a.csv.as_deref() {
        Some(p) if p == Path::new("-") => grt.write_csv(io::stdout().lock())?,
        Some(p) => {
            let mut w = create(p)?;
            grt.write_csv(&mut w)?;
            w.flush()?;
        }
        None => {}
    }
    if a.histogram || a.csv.is_none() {
        let chunk_rows = cfg.allocator.params(&dram)?.chunk_rows;
        let hist = neighbor_histogram(dram.map(), grt, chunk_rows)?;
        let total: usize = hist.values().sum();
        println!(
            "{} logical rows of width {}, {} bytes packed; {} chunks of {} rows",
            grt.logical_rows(),
            grt.width(),
            grt.serialized_len(),
            total,
            chunk_rows
        );
        println!("neighbors,chunks,fraction");
        for (n, c) in &hist {
            println!("{n},{c},{:.4}", *c as f64 / total as f64);
        }
    }
    Ok(0)
}
