//! The single JSON run configuration shared by every front end.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alloc::{AllocatorParams, Mode};
use crate::dram::{Dram, DramConfig};
use crate::error::{Error, Result};
use crate::modes::make_mode;
use crate::workload::{generate_mix, parse_trace, MixSpec, ReplayConfig, TraceEvent};

/// Mode plus optional overrides of the mode's own parameters.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllocatorSection {
    pub mode: Option<Mode>,
    pub chunk_rows: Option<u32>,
    pub n_guard: Option<u32>,
    pub switch_threshold_bytes: Option<u64>,
    pub zonelets: Option<bool>,
    pub expansion: Option<bool>,
    pub max_order: Option<u32>,
}

impl AllocatorSection {
    pub fn mode(&self) -> Mode {
        self.mode.unwrap_or(Mode::Aegis)
    }

    /// Starts from the mode's parameters and applies every override.
    pub fn params(&self, dram: &Dram) -> Result<AllocatorParams> {
        let mut p = make_mode(self.mode(), dram)?;
        if let Some(v) = self.chunk_rows {
            p.chunk_rows = v;
        }
        if let Some(v) = self.n_guard {
            p.n_guard = v;
        }
        if let Some(v) = self.switch_threshold_bytes {
            p.switch_threshold_bytes = v;
        }
        if let Some(v) = self.zonelets {
            p.zonelets_enabled = v;
        }
        if let Some(v) = self.expansion {
            p.expansion_enabled = v;
        }
        if let Some(v) = self.max_order {
            p.max_order = v;
        }
        if p.mode != Mode::Buddy {
            p.validate(dram)?;
        }
        Ok(p)
    }
}

/// Either a trace file or a mix to generate one from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSection {
    pub trace: Option<PathBuf>,
    pub mix: Option<MixSpec>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    pub sample_interval: u64,
    pub verify: bool,
    /// Events between checks when `verify` is on; 0 checks only at the end.
    pub verify_every: u64,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: None,
            sample_interval: 1000,
            verify: false,
            verify_every: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dram: DramConfig,
    pub allocator: AllocatorSection,
    pub workload: WorkloadSection,
    pub output: OutputSection,
    pub seed: Option<u64>,
}

impl RunConfig {
    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::config("config", format!("cannot read {}: {e}", path.display()))
        })?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(t) = &cfg.workload.trace {
            if t.is_relative() {
                cfg.workload.trace = Some(base.join(t));
            }
        }
        Ok(cfg)
    }

    pub fn build_dram(&self) -> Result<Dram> {
        self.dram.build()
    }

    /// The mix with the run seed applied, if the workload is a mix.
    pub fn mix(&self) -> Option<MixSpec> {
        self.workload.mix.clone().map(|mut m| {
            if let Some(s) = self.seed {
                m.seed = s;
            }
            m
        })
    }

    /// Loads or generates the trace.
    pub fn trace(&self) -> Result<Vec<TraceEvent>> {
        match (&self.workload.trace, self.mix()) {
            (Some(_), Some(_)) => Err(Error::config("workload", "give either `trace` or `mix`, not both")),
            (Some(path), None) => {
                let f = fs::File::open(path).map_err(|e| {
                    Error::config("workload.trace", format!("cannot open {}: {e}", path.display()))
                })?;
                parse_trace(std::io::BufReader::new(f))
            }
            (None, Some(mix)) => generate_mix(&mix),
            (None, None) => Err(Error::config("workload", "needs a `trace` path or a `mix`")),
        }
    }

    pub fn replay_config(&self) -> ReplayConfig {
        ReplayConfig {
            sample_interval: self.output.sample_interval,
            verify_every: self.output.verify_every,
            verify: self.output.verify,
            seed: self.seed.unwrap_or(0),
        }
    }
}
