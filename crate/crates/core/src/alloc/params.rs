use serde::{Deserialize, Serialize};

use crate::dram::transform::GROUP_ROWS;
use crate::dram::Dram;
use crate::error::{Error, Result};

/// Which allocator a run models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Zones plus zonelets under the switch threshold.
    Aegis,
    /// Every allocation goes to a striped chunk.
    Zebram,
    /// Large unguarded chunks, one or more per domain.
    Siloz,
    /// Rowhammer-oblivious buddy allocator.
    Buddy,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Aegis, Mode::Zebram, Mode::Siloz, Mode::Buddy];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Aegis => "aegis",
            Mode::Zebram => "zebram",
            Mode::Siloz => "siloz",
            Mode::Buddy => "buddy",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("mode", format!("unknown mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllocatorParams {
    pub mode: Mode,
    /// Logical global rows per reservation chunk.
    pub chunk_rows: u32,
    pub n_guard: u32,
    pub switch_threshold_bytes: u64,
    pub zonelets_enabled: bool,
    pub expansion_enabled: bool,
    pub max_order: u32,
}

impl Default for AllocatorParams {
    fn default() -> Self {
        AllocatorParams {
            mode: Mode::Aegis,
            chunk_rows: 16,
            n_guard: 2,
            switch_threshold_bytes: 12 << 20,
            zonelets_enabled: true,
            expansion_enabled: true,
            max_order: 11,
        }
    }
}

impl AllocatorParams {
    pub fn validate(&self, dram: &Dram) -> Result<()> {
        if self.chunk_rows == 0 {
            return Err(Error::config("chunk_rows", "must be positive"));
        }
        if self.chunk_rows <= self.n_guard {
            return Err(Error::config(
                "chunk_rows",
                format!(
                    "{} rows leave no data row after {} guard rows",
                    self.chunk_rows, self.n_guard
                ),
            ));
        }
        let rows = dram.logical_rows();
        if rows % self.chunk_rows != 0 {
            return Err(Error::config(
                "chunk_rows",
                format!("{} does not divide {rows} logical rows", self.chunk_rows),
            ));
        }
        // Unguarded chunks (siloz) may span several groups: with no guard
        // rows there is no physical front to keep contiguous.
        let tiles = GROUP_ROWS % self.chunk_rows == 0
            || (self.n_guard == 0 && self.chunk_rows % GROUP_ROWS == 0);
        if dram.map().is_complex() && !tiles {
            return Err(Error::config(
                "chunk_rows",
                format!(
                    "complex addressing needs chunks of at most {GROUP_ROWS} logical rows \
                     that tile an 8-row group, got {}",
                    self.chunk_rows
                ),
            ));
        }
        if !dram.pages_per_row().is_power_of_two() {
            return Err(Error::config(
                "global_row_bytes",
                "pages per global row must be a power of two",
            ));
        }
        if self.max_order > 20 {
            return Err(Error::config("max_order", "must be at most 20"));
        }
        match self.mode {
            Mode::Zebram if !self.zonelets_enabled => {
                Err(Error::config("zonelets_enabled", "zebram mode stripes every chunk"))
            }
            Mode::Siloz if self.n_guard != 0 || self.zonelets_enabled => Err(Error::config(
                "n_guard",
                "siloz mode runs without guard rows or zonelets",
            )),
            _ => Ok(()),
        }
    }

    /// Zonelets carved out of one chunk: `floor(chunk_rows / (n_guard + 1))`.
    pub fn zonelets_per_chunk(&self) -> u32 {
        self.chunk_rows / (self.n_guard + 1)
    }

    /// Row offsets of zonelet data rows: each follows `n_guard` guard rows.
    pub fn zonelet_data_rows(&self) -> Vec<u32> {
        (0..self.zonelets_per_chunk())
            .map(|k| self.n_guard + k * (self.n_guard + 1))
            .collect()
    }
}
