//! Turns flags plus an optional config file into a ready-to-run setup.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use anyhow::{Context, Result};
use rowguard::alloc::AllocatorParams;
use rowguard::config::RunConfig;
use rowguard::dram::Dram;
use rowguard::metrics::{summarize, Summary};
use rowguard::modes::Machine;
use rowguard::workload::{replay, MixSpec, ReplayConfig, ReplayOutcome, TraceEvent};

use crate::RunArgs;

pub const SEED_ENV: &str = "ROWGUARD_SEED";

/// Seed from the environment, if set.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => Ok(Some(
            s.trim()
                .parse()
                .with_context(|| format!("{SEED_ENV}={s} is not an unsigned integer"))?,
        )),
        Err(_) => Ok(None),
    }
}

pub fn read_mix(path: &Path) -> Result<MixSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read mix spec {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("bad mix spec {}", path.display()))
}

/// The config file (or defaults) with every flag applied.
pub fn resolve(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let a = &mut cfg.allocator;
    if let Some(m) = args.mode {
        a.mode = Some(m);
    }
    if let Some(v) = args.chunk_rows {
        a.chunk_rows = Some(v);
    }
    if let Some(v) = args.n_guard {
        a.n_guard = Some(v);
    }
    if let Some(v) = args.switch_threshold {
        a.switch_threshold_bytes = Some(v);
    }
    if args.no_expand {
        a.expansion = Some(false);
    }
    if args.no_zonelets {
        a.zonelets = Some(false);
    }
    if let Some(t) = &args.trace {
        cfg.workload.trace = Some(t.clone());
        cfg.workload.mix = None;
    }
    if let Some(m) = &args.mix {
        cfg.workload.mix = Some(read_mix(m)?);
        cfg.workload.trace = None;
    }
    if let Some(v) = args.sample_interval {
        cfg.output.sample_interval = v;
    }
    cfg.seed = match args.seed.or(cfg.seed) {
        Some(s) => Some(s),
        None => env_seed()?,
    };
    Ok(cfg)
}

/// Everything a replay needs, built once and shared by parallel runs.
pub struct Setup {
    pub cfg: RunConfig,
    pub dram: Arc<Dram>,
    pub params: AllocatorParams,
    pub trace: Vec<TraceEvent>,
}

impl Setup {
    pub fn new(args: &RunArgs) -> Result<Self> {
        let cfg = resolve(args)?;
        let dram = Arc::new(cfg.build_dram().context("building the DRAM model")?);
        let params = cfg.allocator.params(&dram)?;
        let trace = cfg.trace()?;
        log::info!("{} events, mode {}", trace.len(), params.mode);
        Ok(Setup {
            cfg,
            dram,
            params,
            trace,
        })
    }

    pub fn replay_config(&self) -> ReplayConfig {
        self.cfg.replay_config()
    }

    pub fn run(&self, params: &AllocatorParams, rc: &ReplayConfig) -> Result<(ReplayOutcome, Summary)> {
        let mut m = Machine::new(self.dram.clone(), params.clone())?;
        let out = replay(&self.trace, &mut m, &self.dram, rc)?;
        let summary = summarize(&out.timeline, out.failed_requests)?;
        Ok((out, summary))
    }
}
