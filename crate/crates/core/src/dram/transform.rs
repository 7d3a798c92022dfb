//! In-DRAM row address transformations.
//!
//! A row-ID is first scrambled (an invertible map on bits `[2:0]`, optionally
//! perturbed by XOR taps from higher bits), then mirrored on odd ranks (pairs
//! of higher bits are swapped), then inverted on the B half-row (a mask of
//! higher bits is flipped). Mirroring and inversion never touch bits `[2:0]`,
//! so aligned groups of eight row-IDs stay together.

use serde::{Deserialize, Serialize};

use super::geometry::DramGeometry;
use crate::error::{Error, Result};

/// Number of low row-ID bits the scrambler acts on.
pub const SCRAMBLE_BITS: u32 = 3;
/// Rows per scramble group.
pub const GROUP_ROWS: u32 = 1 << SCRAMBLE_BITS;
const LOW_MASK: u32 = GROUP_ROWS - 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AddressingMode {
    Simple,
    Complex,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankParity {
    Even,
    Odd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum HalfRow {
    A,
    B,
}

/// One of the four physical row spaces a global row is spread over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Location {
    pub parity: RankParity,
    pub side: HalfRow,
}

impl Location {
    pub const ALL: [Location; 4] = [
        Location::new(RankParity::Even, HalfRow::A),
        Location::new(RankParity::Even, HalfRow::B),
        Location::new(RankParity::Odd, HalfRow::A),
        Location::new(RankParity::Odd, HalfRow::B),
    ];

    pub const fn new(parity: RankParity, side: HalfRow) -> Self {
        Location { parity, side }
    }
}

/// Low-bit scrambler: output bit `i` is the parity of `matrix[i] & low`
/// XOR the parity of `taps[i] & row`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScrambleConfig {
    pub matrix: [u8; 3],
    pub taps: [u32; 3],
}

impl ScrambleConfig {
    pub fn identity() -> Self {
        ScrambleConfig {
            matrix: [0b001, 0b010, 0b100],
            taps: [0; 3],
        }
    }
}

impl Default for ScrambleConfig {
    /// b0' = b0 ^ b1, b1' = b1 ^ b2, b2' = b2.
    fn default() -> Self {
        ScrambleConfig {
            matrix: [0b011, 0b110, 0b100],
            taps: [0; 3],
        }
    }
}

/// Fields left out of a config take the representative complex values, so
/// `{"mode": "complex"}` alone is enough.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default = "TransformConfig::unfilled", deny_unknown_fields)]
pub struct TransformConfig {
    pub mode: AddressingMode,
    pub scramble: ScrambleConfig,
    pub mirror_pairs: Vec<(u8, u8)>,
    pub inversion_mask: u32,
}

impl Default for TransformConfig {
    fn default() -> Self {
        TransformConfig::simple()
    }
}

impl TransformConfig {
    pub fn simple() -> Self {
        TransformConfig {
            mode: AddressingMode::Simple,
            scramble: ScrambleConfig::identity(),
            mirror_pairs: Vec::new(),
            inversion_mask: 0,
        }
    }

    fn unfilled() -> Self {
        TransformConfig {
            mode: AddressingMode::Simple,
            ..TransformConfig::complex_default()
        }
    }

    /// Representative server DIMM transforms. Mirroring swaps row bits
    /// (6,8) and (15,16); inversion flips bits 3, 4, 7, 10, 13 and 14.
    pub fn complex_default() -> Self {
        TransformConfig {
            mode: AddressingMode::Complex,
            scramble: ScrambleConfig::default(),
            mirror_pairs: DEFAULT_MIRROR_PAIRS.to_vec(),
            inversion_mask: DEFAULT_INVERSION_MASK,
        }
    }
}

pub const DEFAULT_MIRROR_PAIRS: [(u8, u8); 2] = [(6, 8), (15, 16)];
pub const DEFAULT_INVERSION_MASK: u32 = 0b110_0100_1001_1000;

/// Validated, ready-to-apply transforms for one geometry.
#[derive(Clone, Debug)]
pub struct AddressMap {
    mode: AddressingMode,
    row_bits: u32,
    rows: u32,
    scramble_fwd: [u8; 8],
    scramble_inv: [u8; 8],
    taps: [u32; 3],
    mirror_pairs: Vec<(u32, u32)>,
    inversion_mask: u32,
}

impl AddressMap {
    /// Simple mode ignores the configured scramble, mirror and inversion.
    pub fn new(geo: &DramGeometry, cfg: &TransformConfig) -> Result<Self> {
        let row_bits = geo.row_bits();
        let rows = geo.rows_per_bank() as u32;
        let mut map = AddressMap {
            mode: cfg.mode,
            row_bits,
            rows,
            scramble_fwd: [0, 1, 2, 3, 4, 5, 6, 7],
            scramble_inv: [0, 1, 2, 3, 4, 5, 6, 7],
            taps: [0; 3],
            mirror_pairs: Vec::new(),
            inversion_mask: 0,
        };
        if cfg.mode == AddressingMode::Simple {
            return Ok(map);
        }
        if rows < GROUP_ROWS {
            return Err(Error::Transform(format!(
                "complex addressing needs at least {GROUP_ROWS} rows per bank"
            )));
        }
        let field_mask = rows - 1;
        let high_mask = field_mask & !LOW_MASK;

        let mut fwd = [0u8; 8];
        for (low, out) in fwd.iter_mut().enumerate() {
            *out = apply_matrix(&cfg.scramble.matrix, low as u8);
        }
        let mut inv = [u8::MAX; 8];
        for (low, &out) in fwd.iter().enumerate() {
            if cfg.scramble.matrix.iter().any(|&m| m > 0b111) || inv[out as usize] != u8::MAX {
                return Err(Error::Transform(format!(
                    "scramble matrix {:?} is not invertible",
                    cfg.scramble.matrix
                )));
            }
            inv[out as usize] = low as u8;
        }
        for &tap in &cfg.scramble.taps {
            if tap & !high_mask != 0 {
                return Err(Error::Transform(format!(
                    "scramble tap mask {tap:#x} must use only row bits 3..{row_bits}"
                )));
            }
        }

        let mut used = 0u32;
        for &(a, b) in &cfg.mirror_pairs {
            let (a, b) = (a as u32, b as u32);
            if a == b || a < SCRAMBLE_BITS || b < SCRAMBLE_BITS || a >= row_bits || b >= row_bits {
                return Err(Error::Transform(format!(
                    "mirror pair ({a},{b}) must name two distinct row bits in 3..{row_bits}"
                )));
            }
            let bits = (1 << a) | (1 << b);
            if used & bits != 0 {
                return Err(Error::Transform(format!(
                    "mirror pair ({a},{b}) overlaps another pair"
                )));
            }
            used |= bits;
        }
        if cfg.inversion_mask & !high_mask != 0 {
            return Err(Error::Transform(format!(
                "inversion mask {:#x} must use only row bits 3..{row_bits}",
                cfg.inversion_mask
            )));
        }

        map.scramble_fwd = fwd;
        map.scramble_inv = inv;
        map.taps = cfg.scramble.taps;
        map.mirror_pairs = cfg
            .mirror_pairs
            .iter()
            .map(|&(a, b)| (a as u32, b as u32))
            .collect();
        map.inversion_mask = cfg.inversion_mask;
        Ok(map)
    }

    pub fn mode(&self) -> AddressingMode {
        self.mode
    }

    pub fn is_complex(&self) -> bool {
        self.mode == AddressingMode::Complex
    }

    pub fn rows(&self) -> u32 {
        self.rows
    }

    pub fn row_bits(&self) -> u32 {
        self.row_bits
    }

    fn tap_bits(&self, row: u32) -> u32 {
        let mut out = 0;
        for (i, &tap) in self.taps.iter().enumerate() {
            out |= ((row & tap).count_ones() & 1) << i;
        }
        out
    }

    pub fn scramble(&self, row: u32) -> u32 {
        let low = self.scramble_fwd[(row & LOW_MASK) as usize] as u32;
        (row & !LOW_MASK) | (low ^ self.tap_bits(row))
    }

    pub fn unscramble(&self, row: u32) -> u32 {
        // taps read only bits >= 3, which scrambling leaves untouched
        let low = (row & LOW_MASK) ^ self.tap_bits(row);
        (row & !LOW_MASK) | self.scramble_inv[low as usize] as u32
    }

    pub fn mirror(&self, row: u32) -> u32 {
        let mut out = row;
        for &(a, b) in &self.mirror_pairs {
            if (row >> a) & 1 != (row >> b) & 1 {
                out ^= (1 << a) | (1 << b);
            }
        }
        out
    }

    pub fn invert(&self, row: u32) -> u32 {
        row ^ self.inversion_mask
    }

    fn physical_unchecked(&self, row: u32, loc: Location) -> u32 {
        let mut p = self.scramble(row);
        if loc.parity == RankParity::Odd {
            p = self.mirror(p);
        }
        if loc.side == HalfRow::B {
            p = self.invert(p);
        }
        p
    }

    /// Physical row index of `row` within the given rank parity / half-row
    /// space: scramble, then mirror on odd ranks, then invert on side B.
    pub fn physical_row(&self, row: u32, loc: Location) -> Result<u32> {
        self.check_row(row)?;
        Ok(self.physical_unchecked(row, loc))
    }

    /// The row-ID stored at physical row `phys` of the given space.
    pub fn row_at(&self, phys: u32, loc: Location) -> Result<u32> {
        self.check_row(phys)?;
        Ok(self.row_at_unchecked(phys, loc))
    }

    pub(crate) fn row_at_unchecked(&self, phys: u32, loc: Location) -> u32 {
        let mut r = phys;
        if loc.side == HalfRow::B {
            r = self.invert(r);
        }
        if loc.parity == RankParity::Odd {
            r = self.mirror(r);
        }
        self.unscramble(r)
    }

    pub(crate) fn physical(&self, row: u32, loc: Location) -> u32 {
        self.physical_unchecked(row, loc)
    }

    fn check_row(&self, row: u32) -> Result<()> {
        if row >= self.rows {
            return Err(Error::OutOfRange {
                what: "row",
                value: row as u64,
                limit: self.rows as u64,
            });
        }
        Ok(())
    }
}

fn apply_matrix(matrix: &[u8; 3], low: u8) -> u8 {
    let mut out = 0;
    for (i, &m) in matrix.iter().enumerate() {
        out |= (((m & low).count_ones() & 1) as u8) << i;
    }
    out
}
