use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Pfn;

/// Raw geometry parameters as they appear in a config file.
///
/// `global_row_bytes` defaults to `row_bytes * banks`: one global row is the
/// same row-ID across every bank.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub row_bytes: u64,
    pub rows_per_bank: u64,
    pub banks: u64,
    pub page_bytes: u64,
    pub ranks_per_dimm: u64,
    pub global_row_bytes: Option<u64>,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            row_bytes: 8 << 10,
            rows_per_bank: 128 << 10,
            banks: 128,
            page_bytes: 4 << 10,
            ranks_per_dimm: 2,
            global_row_bytes: None,
        }
    }
}

impl GeometryConfig {
    /// Smallest geometry that still exercises every code path: 8 global rows
    /// of four pages each.
    pub fn tiny() -> Self {
        GeometryConfig {
            rows_per_bank: 8,
            global_row_bytes: Some(16 << 10),
            ..GeometryConfig::default()
        }
    }

    pub fn build(&self) -> Result<DramGeometry> {
        DramGeometry::new(self)
    }
}

/// Validated DRAM dimensions plus the counts derived from them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DramGeometry {
    row_bytes: u64,
    rows_per_bank: u64,
    banks: u64,
    page_bytes: u64,
    ranks_per_dimm: u64,
    global_row_bytes: u64,
    pages_per_global_row: u64,
}

/// Every DRAM row is split into two half-rows.
pub const HALF_ROWS_PER_ROW: u64 = 2;

impl DramGeometry {
    pub fn new(cfg: &GeometryConfig) -> Result<Self> {
        let positive = [
            ("row_bytes", cfg.row_bytes),
            ("rows_per_bank", cfg.rows_per_bank),
            ("banks", cfg.banks),
            ("page_bytes", cfg.page_bytes),
            ("ranks_per_dimm", cfg.ranks_per_dimm),
        ];
        for (field, value) in positive {
            if value == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !cfg.rows_per_bank.is_power_of_two() {
            return Err(Error::config(
                "rows_per_bank",
                format!("{} is not a power of two", cfg.rows_per_bank),
            ));
        }
        if cfg.rows_per_bank > 1 << 31 {
            return Err(Error::config("rows_per_bank", "exceeds 2^31"));
        }
        let global_row_bytes = cfg
            .global_row_bytes
            .unwrap_or(cfg.row_bytes.saturating_mul(cfg.banks));
        if global_row_bytes == 0 {
            return Err(Error::config("global_row_bytes", "must be positive"));
        }
        if global_row_bytes % cfg.page_bytes != 0 {
            return Err(Error::config(
                "global_row_bytes",
                format!(
                    "{global_row_bytes} is not a multiple of page_bytes {}",
                    cfg.page_bytes
                ),
            ));
        }
        Ok(DramGeometry {
            row_bytes: cfg.row_bytes,
            rows_per_bank: cfg.rows_per_bank,
            banks: cfg.banks,
            page_bytes: cfg.page_bytes,
            ranks_per_dimm: cfg.ranks_per_dimm,
            global_row_bytes,
            pages_per_global_row: global_row_bytes / cfg.page_bytes,
        })
    }

    pub fn row_bytes(&self) -> u64 {
        self.row_bytes
    }

    pub fn rows_per_bank(&self) -> u64 {
        self.rows_per_bank
    }

    pub fn banks(&self) -> u64 {
        self.banks
    }

    pub fn page_bytes(&self) -> u64 {
        self.page_bytes
    }

    pub fn ranks_per_dimm(&self) -> u64 {
        self.ranks_per_dimm
    }

    pub fn global_row_bytes(&self) -> u64 {
        self.global_row_bytes
    }

    pub fn pages_per_global_row(&self) -> u64 {
        self.pages_per_global_row
    }

    /// One global row per row-ID.
    pub fn total_global_rows(&self) -> u64 {
        self.rows_per_bank
    }

    pub fn total_pages(&self) -> u64 {
        self.total_global_rows() * self.pages_per_global_row
    }

    pub fn total_bytes(&self) -> u64 {
        self.total_global_rows() * self.global_row_bytes
    }

    /// Width of the row-ID field in bits.
    pub fn row_bits(&self) -> u32 {
        self.rows_per_bank.trailing_zeros()
    }

    /// Row-ID bits sit above the page-in-row bits, so every page of a global
    /// row shares one row-ID.
    pub fn page_to_global_row(&self, pfn: Pfn) -> Result<u32> {
        if pfn.0 >= self.total_pages() {
            return Err(Error::OutOfRange {
                what: "pfn",
                value: pfn.0,
                limit: self.total_pages(),
            });
        }
        Ok((pfn.0 / self.pages_per_global_row) as u32)
    }

    pub fn first_page_of_row(&self, row: u32) -> Pfn {
        Pfn(row as u64 * self.pages_per_global_row)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry_matches_server_config() {
        let geo = GeometryConfig::default().build().unwrap();
        assert_eq!(geo.global_row_bytes(), 1 << 20);
        assert_eq!(geo.pages_per_global_row(), 256);
        assert_eq!(geo.total_global_rows(), 131_072);
        assert_eq!(geo.total_bytes(), 128 << 30);
        assert_eq!(geo.total_pages(), 131_072 * 256);
        assert_eq!(geo.row_bits(), 17);
    }

    #[test]
    fn tiny_geometry() {
        let geo = GeometryConfig::tiny().build().unwrap();
        assert_eq!(geo.total_global_rows(), 8);
        assert_eq!(geo.pages_per_global_row(), 4);
        assert_eq!(geo.total_pages(), 32);
    }

    #[test]
    fn rejects_bad_dimensions() {
        let cfg = GeometryConfig {
            rows_per_bank: 100,
            ..Default::default()
        };
        match cfg.build() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "rows_per_bank"),
            other => panic!("expected config error, got {other:?}"),
        }
        let cfg = GeometryConfig {
            banks: 0,
            ..Default::default()
        };
        match cfg.build() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "banks"),
            other => panic!("expected config error, got {other:?}"),
        }
        let cfg = GeometryConfig {
            global_row_bytes: Some(6 << 10),
            ..Default::default()
        };
        assert!(cfg.build().is_err());
    }

    #[test]
    fn page_to_row_boundaries() {
        let geo = GeometryConfig::default().build().unwrap();
        assert_eq!(geo.page_to_global_row(Pfn(0)).unwrap(), 0);
        assert_eq!(geo.page_to_global_row(Pfn(255)).unwrap(), 0);
        assert_eq!(geo.page_to_global_row(Pfn(256)).unwrap(), 1);
        let last = 131_072 * 256 - 1;
        assert_eq!(geo.page_to_global_row(Pfn(last)).unwrap(), 131_071);
        assert!(geo.page_to_global_row(Pfn(last + 1)).is_err());
    }

    #[test]
    fn page_to_row_fibers_have_equal_size() {
        let geo = GeometryConfig {
            rows_per_bank: 64,
            ..GeometryConfig::tiny()
        }
        .build()
        .unwrap();
        let mut counts = vec![0u64; geo.total_global_rows() as usize];
        for pfn in 0..geo.total_pages() {
            counts[geo.page_to_global_row(Pfn(pfn)).unwrap() as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c == geo.pages_per_global_row()));
    }
}
