//! DWT comparators used as data-address range watchpoints.
//!
//! ARMv7-M comparators watch `[comp, comp + 2^mask)` and match when
//! `address & !(2^mask - 1) == comp`. ARMv8-M pairs two consecutive
//! comparators as an inclusive `[lower, upper]` bound. Any enabled comparator
//! hit by a data access of the watched kind raises a debug monitor exception,
//! provided `DEMCR.MON_EN` is set. Instruction fetches never match.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::addr::AddrRange;
use crate::mpu::{AccessEvent, AccessKind};

/// Bit position of MON_EN in DEMCR.
pub const DEMCR_MON_EN_BIT: u32 = 16;
pub const DEMCR_ADDRESS: u32 = 0xE000_EDFC;
/// Largest mask a 32-bit address can use.
pub const ARCH_MAX_MASK: u8 = 31;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WatchKind {
    Read,
    Write,
    ReadWrite,
    Disabled,
}

impl WatchKind {
    pub fn watches(&self, kind: AccessKind) -> bool {
        matches!(
            (self, kind),
            (WatchKind::Read | WatchKind::ReadWrite, AccessKind::Read)
                | (WatchKind::Write | WatchKind::ReadWrite, AccessKind::Write)
        )
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            WatchKind::Read => "read",
            WatchKind::Write => "write",
            WatchKind::ReadWrite => "read_write",
            WatchKind::Disabled => "disabled",
        }
    }
}

impl fmt::Display for WatchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WatchKind {
    type Err = DwtError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "read" => Ok(WatchKind::Read),
            "write" => Ok(WatchKind::Write),
            "read_write" => Ok(WatchKind::ReadWrite),
            "disabled" => Ok(WatchKind::Disabled),
            _ => Err(DwtError::UnknownFunction(s.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    V7m,
    V8m,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::V7m => "v7m",
            Arch::V8m => "v8m",
        })
    }
}

/// ARMv7-M comparator: `DWT_COMP<n>`, `DWT_MASK<n>`, `DWT_FUNC<n>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ComparatorV7 {
    pub index: u8,
    pub comp: u32,
    pub mask: u8,
    pub function: WatchKind,
}

impl ComparatorV7 {
    pub fn span(&self) -> u64 {
        1u64 << self.mask
    }

    pub fn range(&self) -> AddrRange {
        AddrRange::new(self.comp, self.span())
    }

    pub fn matches_address(&self, address: u32) -> bool {
        let low = (self.span() - 1) as u32;
        address & !low == self.comp
    }
}

/// ARMv8-M comparator pair: `DWT_COMP<n>` holds the lower bound and
/// `DWT_COMP<n+1>` the inclusive upper bound.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ComparatorPairV8 {
    pub index: u8,
    pub lower: u32,
    pub upper: u32,
    pub function: WatchKind,
}

impl ComparatorPairV8 {
    pub fn range(&self) -> AddrRange {
        AddrRange::inclusive(self.lower, self.upper)
    }

    pub fn matches_address(&self, address: u32) -> bool {
        self.lower <= address && address <= self.upper
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Comparator {
    V7(ComparatorV7),
    V8(ComparatorPairV8),
}

impl Comparator {
    pub fn index(&self) -> u8 {
        match self {
            Comparator::V7(c) => c.index,
            Comparator::V8(c) => c.index,
        }
    }

    pub fn function(&self) -> WatchKind {
        match self {
            Comparator::V7(c) => c.function,
            Comparator::V8(c) => c.function,
        }
    }

    pub fn range(&self) -> AddrRange {
        match self {
            Comparator::V7(c) => c.range(),
            Comparator::V8(c) => c.range(),
        }
    }

    pub fn matches_address(&self, address: u32) -> bool {
        match self {
            Comparator::V7(c) => c.matches_address(address),
            Comparator::V8(c) => c.matches_address(address),
        }
    }

    /// Hardware comparator slots used: one for v7, two for a v8 pair.
    pub fn slots(&self) -> usize {
        match self {
            Comparator::V7(_) => 1,
            Comparator::V8(_) => 2,
        }
    }

    pub fn arch(&self) -> Arch {
        match self {
            Comparator::V7(_) => Arch::V7m,
            Comparator::V8(_) => Arch::V8m,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Demcr {
    pub mon_en: bool,
}

impl Demcr {
    pub fn bits(&self) -> u32 {
        (self.mon_en as u32) << DEMCR_MON_EN_BIT
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DwtError {
    #[error("range of {size} bytes needs a mask above the device maximum {max_mask}")]
    TooLarge { size: u64, max_mask: u8 },
    #[error("comparator {index}: mask {mask} exceeds maximum {max_mask}")]
    MaskTooLarge { index: u8, mask: u8, max_mask: u8 },
    #[error("comparator {index}: DWT_COMP {comp:#010x} is not aligned to 2^{mask}")]
    Misaligned { index: u8, comp: u32, mask: u8 },
    #[error("comparator pair {index}: lower bound {lower:#010x} is above upper bound {upper:#010x}")]
    InvertedBounds { index: u8, lower: u32, upper: u32 },
    #[error("comparator pair index {0} is not even")]
    OddPairIndex(u8),
    #[error("comparator {index} is {found} but the unit is {arch}")]
    ArchMismatch { index: u8, arch: Arch, found: Arch },
    #[error("comparator slot {0} is used twice")]
    DuplicateIndex(u8),
    #[error("{used} comparator slots used, device has {budget}")]
    BudgetExceeded { used: usize, budget: usize },
    #[error("comparator slot {index} is beyond the device's {budget} comparators")]
    IndexOutOfRange { index: u8, budget: usize },
    #[error("unknown DWT function `{0}`")]
    UnknownFunction(String),
}

/// A validated DWT configuration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DwtConfig {
    arch: Arch,
    comparators: Vec<Comparator>,
    demcr: Demcr,
    max_mask: u8,
    budget: usize,
}

impl DwtConfig {
    pub fn new(
        arch: Arch,
        mut comparators: Vec<Comparator>,
        demcr: Demcr,
        max_mask: u8,
        budget: usize,
    ) -> Result<Self, DwtError> {
        let mut slots = BTreeSet::new();
        for c in &comparators {
            if c.arch() != arch {
                return Err(DwtError::ArchMismatch { index: c.index(), arch, found: c.arch() });
            }
            match c {
                Comparator::V7(v) => {
                    if v.mask > max_mask.min(ARCH_MAX_MASK) {
                        return Err(DwtError::MaskTooLarge { index: v.index, mask: v.mask, max_mask });
                    }
                    if !(v.comp as u64).is_multiple_of(v.span()) {
                        return Err(DwtError::Misaligned { index: v.index, comp: v.comp, mask: v.mask });
                    }
                }
                Comparator::V8(p) => {
                    if p.index % 2 != 0 {
                        return Err(DwtError::OddPairIndex(p.index));
                    }
                    if p.lower > p.upper {
                        return Err(DwtError::InvertedBounds { index: p.index, lower: p.lower, upper: p.upper });
                    }
                }
            }
            for slot in c.index()..c.index() + c.slots() as u8 {
                if !slots.insert(slot) {
                    return Err(DwtError::DuplicateIndex(slot));
                }
                if slot as usize >= budget {
                    return Err(DwtError::IndexOutOfRange { index: slot, budget });
                }
            }
        }
        let used: usize = comparators.iter().map(Comparator::slots).sum();
        if used > budget {
            return Err(DwtError::BudgetExceeded { used, budget });
        }
        comparators.sort_by_key(Comparator::index);
        Ok(DwtConfig { arch, comparators, demcr, max_mask, budget })
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    /// Comparators in ascending index order.
    pub fn comparators(&self) -> &[Comparator] {
        &self.comparators
    }

    pub fn demcr(&self) -> Demcr {
        self.demcr
    }

    pub fn max_mask(&self) -> u8 {
        self.max_mask
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn slots_used(&self) -> usize {
        self.comparators.iter().map(Comparator::slots).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DebugMonitorException {
    pub comparator: u8,
    pub address: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DwtLint {
    /// A comparator matched but `DEMCR.MON_EN` is clear, so nothing trapped.
    MatchWithMonitorDisabled { comparator: u8, address: u32 },
}

impl fmt::Display for DwtLint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DwtLint::MatchWithMonitorDisabled { comparator, address } => {
                write!(f, "comparator {comparator} matched {address:#010x} but DEMCR.MON_EN is clear")
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct DwtMatch {
    pub exception: Option<DebugMonitorException>,
    pub lint: Option<DwtLint>,
}

/// Lowest-index enabled comparator watching this event, ignoring MON_EN.
pub fn matching_comparator<'a>(config: &'a DwtConfig, event: &AccessEvent) -> Option<&'a Comparator> {
    if !event.kind().is_data() {
        return None;
    }
    config.comparators.iter().find(|c| c.function().watches(event.kind()) && c.matches_address(event.address()))
}

pub fn dwt_match(config: &DwtConfig, event: &AccessEvent) -> DwtMatch {
    let Some(c) = matching_comparator(config, event) else {
        return DwtMatch::default();
    };
    let address = event.address();
    if config.demcr.mon_en {
        DwtMatch { exception: Some(DebugMonitorException { comparator: c.index(), address }), lint: None }
    } else {
        DwtMatch { exception: None, lint: Some(DwtLint::MatchWithMonitorDisabled { comparator: c.index(), address }) }
    }
}

/// Smallest mask whose range covers `size` bytes.
pub fn mask_for_size(size: u64, max_mask: u8) -> Result<u8, DwtError> {
    let mask = size.max(1).next_power_of_two().trailing_zeros();
    if mask > max_mask.min(ARCH_MAX_MASK) as u32 {
        Err(DwtError::TooLarge { size, max_mask })
    } else {
        Ok(mask as u8)
    }
}
