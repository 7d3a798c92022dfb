//! DRAM geometry, row address transforms and the Global Row Table.

pub mod geometry;
pub mod grt;
pub mod neighbors;
pub mod transform;

use serde::{Deserialize, Serialize};

pub use geometry::{DramGeometry, GeometryConfig};
pub use grt::GlobalRowTable;
pub use transform::{AddressMap, AddressingMode, HalfRow, Location, RankParity, TransformConfig};

use crate::error::Result;
use crate::types::Pfn;

/// The `dram` section of a run config.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DramConfig {
    pub geometry: GeometryConfig,
    pub transforms: TransformConfig,
}

impl DramConfig {
    pub fn complex() -> Self {
        DramConfig {
            geometry: GeometryConfig::default(),
            transforms: TransformConfig::complex_default(),
        }
    }

    pub fn build(&self) -> Result<Dram> {
        Dram::new(self)
    }
}

/// Everything the allocator needs to know about the memory it manages.
/// Immutable once built; share it behind an `Arc`.
#[derive(Clone, Debug)]
pub struct Dram {
    geo: DramGeometry,
    map: AddressMap,
    grt: GlobalRowTable,
}

impl Dram {
    pub fn new(cfg: &DramConfig) -> Result<Self> {
        let geo = cfg.geometry.build()?;
        let map = AddressMap::new(&geo, &cfg.transforms)?;
        let grt = GlobalRowTable::build(&map)?;
        Ok(Dram { geo, map, grt })
    }

    pub fn geometry(&self) -> &DramGeometry {
        &self.geo
    }

    pub fn map(&self) -> &AddressMap {
        &self.map
    }

    pub fn grt(&self) -> &GlobalRowTable {
        &self.grt
    }

    pub fn pages_per_row(&self) -> u64 {
        self.geo.pages_per_global_row()
    }

    /// Pages addressed by one logical row, padding slots included.
    pub fn pages_per_logical_row(&self) -> u64 {
        self.grt.width() as u64 * self.pages_per_row()
    }

    pub fn logical_rows(&self) -> u32 {
        self.grt.logical_rows() as u32
    }

    /// Physical row of the page in one space.
    pub fn physical_row_of(&self, pfn: Pfn, loc: Location) -> Result<u32> {
        let row = self.geo.page_to_global_row(pfn)?;
        Ok(self.map.physical(row, loc))
    }
}
