//! M-profile MPU model.
//!
//! Regions have a power-of-two size between 32 bytes and 4 GB, a base aligned
//! to that size, and separate R/W/X permissions for privileged and
//! unprivileged code. When enabled regions overlap, the highest region number
//! decides. Addresses in the Private Peripheral Bus ignore the region list
//! entirely: privileged data access is allowed, unprivileged access and
//! instruction fetch are denied.
//!
//! An access matches a region if its first byte does.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::addr::{AddrRange, ADDRESS_SPACE};

/// Private Peripheral Bus, `0xE000_0000..=0xE000_FFFF`.
pub const PPB: AddrRange = AddrRange::new(0xE000_0000, 0x1_0000);

pub const MIN_REGION_SIZE: u64 = 32;
pub const MAX_REGION_SIZE: u64 = ADDRESS_SPACE;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Permission {
    pub read: bool,
    pub write: bool,
    pub execute: bool,
}

impl Permission {
    pub const NONE: Permission = Permission::new(false, false, false);
    pub const R: Permission = Permission::new(true, false, false);
    pub const RW: Permission = Permission::new(true, true, false);
    pub const RX: Permission = Permission::new(true, false, true);
    pub const RWX: Permission = Permission::new(true, true, true);

    pub const fn new(read: bool, write: bool, execute: bool) -> Self {
        Permission { read, write, execute }
    }

    pub fn allows(&self, kind: AccessKind) -> bool {
        match kind {
            AccessKind::Read => self.read,
            AccessKind::Write => self.write,
            AccessKind::Fetch => self.execute,
        }
    }

    /// True if every bit granted by `other` is also granted by `self`.
    pub fn includes(&self, other: &Permission) -> bool {
        (self.read || !other.read) && (self.write || !other.write) && (self.execute || !other.execute)
    }
}

impl fmt::Display for Permission {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = |on: bool, ch: char| if on { ch } else { '-' };
        write!(f, "{}{}{}", c(self.read, 'r'), c(self.write, 'w'), c(self.execute, 'x'))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid permission `{0}`, expected three characters like `r-x`")]
pub struct ParsePermissionError(String);

impl FromStr for Permission {
    type Err = ParsePermissionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let b = s.as_bytes();
        let bit = |i: usize, ch: u8| match b.get(i) {
            Some(&c) if c == ch || c == ch.to_ascii_uppercase() => Some(true),
            Some(b'-') => Some(false),
            _ => None,
        };
        match (b.len(), bit(0, b'r'), bit(1, b'w'), bit(2, b'x')) {
            (3, Some(r), Some(w), Some(x)) => Ok(Permission::new(r, w, x)),
            _ => Err(ParsePermissionError(s.to_string())),
        }
    }
}

impl Serialize for Permission {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Permission {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Privileged,
    Unprivileged,
}

impl Mode {
    pub const ALL: [Mode; 2] = [Mode::Privileged, Mode::Unprivileged];
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Privileged => "privileged",
            Mode::Unprivileged => "unprivileged",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AccessKind {
    Read,
    Write,
    Fetch,
}

impl AccessKind {
    pub const ALL: [AccessKind; 3] = [AccessKind::Read, AccessKind::Write, AccessKind::Fetch];

    pub fn is_data(&self) -> bool {
        !matches!(self, AccessKind::Fetch)
    }
}

impl fmt::Display for AccessKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AccessKind::Read => "read",
            AccessKind::Write => "write",
            AccessKind::Fetch => "fetch",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EventError {
    #[error("access width {0} is not 1, 2 or 4 bytes")]
    BadWidth(u8),
    #[error("{width}-byte access at {address:#010x} wraps the address space")]
    Wraps { address: u32, width: u8 },
}

/// One memory access to adjudicate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AccessEvent {
    mode: Mode,
    kind: AccessKind,
    address: u32,
    width: u8,
}

impl AccessEvent {
    pub fn new(mode: Mode, kind: AccessKind, address: u32, width: u8) -> Result<Self, EventError> {
        if !matches!(width, 1 | 2 | 4) {
            return Err(EventError::BadWidth(width));
        }
        if address as u64 + width as u64 > ADDRESS_SPACE {
            return Err(EventError::Wraps { address, width });
        }
        Ok(AccessEvent { mode, kind, address, width })
    }

    /// Word-sized access; panics if it would wrap, so only for addresses known
    /// to be at least four bytes below the top of memory.
    pub fn word(mode: Mode, kind: AccessKind, address: u32) -> Self {
        AccessEvent::new(mode, kind, address, 4).expect("word access wraps the address space")
    }

    pub fn byte(mode: Mode, kind: AccessKind, address: u32) -> Self {
        AccessEvent { mode, kind, address, width: 1 }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn kind(&self) -> AccessKind {
        self.kind
    }

    pub fn address(&self) -> u32 {
        self.address
    }

    pub fn width(&self) -> u8 {
        self.width
    }

    /// Address of the last byte touched.
    pub fn last_byte(&self) -> u32 {
        self.address + (self.width as u32 - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MpuRegion {
    pub number: u8,
    #[serde(with = "crate::addr::hex32")]
    pub base: u32,
    #[serde(with = "crate::addr::hex64")]
    pub size: u64,
    pub enabled: bool,
    pub privileged: Permission,
    pub unprivileged: Permission,
}

impl MpuRegion {
    pub fn new(number: u8, base: u32, size: u64, privileged: Permission, unprivileged: Permission) -> Self {
        MpuRegion { number, base, size, enabled: true, privileged, unprivileged }
    }

    pub fn range(&self) -> AddrRange {
        AddrRange::new(self.base, self.size)
    }

    pub fn contains(&self, address: u32) -> bool {
        self.range().contains(address)
    }

    pub fn permission(&self, mode: Mode) -> Permission {
        match mode {
            Mode::Privileged => self.privileged,
            Mode::Unprivileged => self.unprivileged,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PermissionBit {
    Read,
    Write,
    Execute,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Error)]
pub enum RegionViolation {
    #[error("size {0:#x} is not a power of two")]
    SizeNotPowerOfTwo(u64),
    #[error("size {0:#x} is outside 32 bytes..=4 GB")]
    SizeOutOfRange(u64),
    #[error("base {base:#010x} is not a multiple of size {size:#x}")]
    Misaligned { base: u32, size: u64 },
    #[error("privileged permission is more restrictive than unprivileged ({bit:?})")]
    PrivilegedMoreRestrictive { bit: PermissionBit },
    #[error("{mode} permission is executable but not readable")]
    ExecuteWithoutRead { mode: Mode },
}

/// Every architectural constraint `region` violates. Empty means valid.
pub fn validate_region(region: &MpuRegion) -> Vec<RegionViolation> {
    let mut out = Vec::new();
    let size = region.size;
    if !(MIN_REGION_SIZE..=MAX_REGION_SIZE).contains(&size) {
        out.push(RegionViolation::SizeOutOfRange(size));
    }
    if !size.is_power_of_two() {
        out.push(RegionViolation::SizeNotPowerOfTwo(size));
    } else if !(region.base as u64).is_multiple_of(size) {
        out.push(RegionViolation::Misaligned { base: region.base, size });
    }
    let (p, u) = (region.privileged, region.unprivileged);
    for (bit, priv_on, unpriv_on) in [
        (PermissionBit::Read, p.read, u.read),
        (PermissionBit::Write, p.write, u.write),
        (PermissionBit::Execute, p.execute, u.execute),
    ] {
        if unpriv_on && !priv_on {
            out.push(RegionViolation::PrivilegedMoreRestrictive { bit });
        }
    }
    for mode in Mode::ALL {
        let perm = region.permission(mode);
        if perm.execute && !perm.read {
            out.push(RegionViolation::ExecuteWithoutRead { mode });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecisionReason {
    RegionPermission,
    PpbFixedRule,
    NoRegion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MpuDecision {
    allowed: bool,
    matched_region: Option<u8>,
    reason: DecisionReason,
}

impl MpuDecision {
    fn region(number: u8, allowed: bool) -> Self {
        MpuDecision { allowed, matched_region: Some(number), reason: DecisionReason::RegionPermission }
    }

    fn ppb(allowed: bool) -> Self {
        MpuDecision { allowed, matched_region: None, reason: DecisionReason::PpbFixedRule }
    }

    fn no_region() -> Self {
        MpuDecision { allowed: false, matched_region: None, reason: DecisionReason::NoRegion }
    }

    pub fn allowed(&self) -> bool {
        self.allowed
    }

    pub fn matched_region(&self) -> Option<u8> {
        self.matched_region
    }

    pub fn reason(&self) -> DecisionReason {
        self.reason
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MpuError {
    #[error("region {number} is invalid: {violations:?}")]
    InvalidRegion { number: u8, violations: Vec<RegionViolation> },
    #[error("region number {0} is used more than once")]
    DuplicateNumber(u8),
}

/// Fixed PPB behaviour, independent of any region.
pub fn ppb_rule(event: &AccessEvent) -> bool {
    event.mode() == Mode::Privileged && event.kind().is_data()
}

/// A region list that passed [`validate_region`] with unique numbers, sorted
/// so that the deciding region is the first enabled match.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionSet {
    by_priority: Vec<MpuRegion>,
}

impl RegionSet {
    pub fn new(regions: &[MpuRegion]) -> Result<Self, MpuError> {
        let mut seen = BTreeSet::new();
        for r in regions {
            let violations = validate_region(r);
            if !violations.is_empty() {
                return Err(MpuError::InvalidRegion { number: r.number, violations });
            }
            if !seen.insert(r.number) {
                return Err(MpuError::DuplicateNumber(r.number));
            }
        }
        let mut by_priority = regions.to_vec();
        by_priority.sort_by_key(|r| std::cmp::Reverse(r.number));
        Ok(RegionSet { by_priority })
    }

    /// Regions in ascending number order.
    pub fn regions(&self) -> impl Iterator<Item = &MpuRegion> {
        self.by_priority.iter().rev()
    }

    /// The enabled region that decides accesses at `address`, ignoring the PPB.
    pub fn deciding_region(&self, address: u32) -> Option<&MpuRegion> {
        self.by_priority.iter().find(|r| r.enabled && r.contains(address))
    }

    pub fn evaluate(&self, event: &AccessEvent) -> MpuDecision {
        if PPB.contains(event.address()) {
            return MpuDecision::ppb(ppb_rule(event));
        }
        match self.deciding_region(event.address()) {
            Some(r) => MpuDecision::region(r.number, r.permission(event.mode()).allows(event.kind())),
            None => MpuDecision::no_region(),
        }
    }
}

/// Adjudicates one access against a region list.
pub fn evaluate_mpu(regions: &[MpuRegion], event: &AccessEvent) -> Result<MpuDecision, MpuError> {
    Ok(RegionSet::new(regions)?.evaluate(event))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Error)]
pub enum WxViolation {
    #[error("region {region} is writable and executable for {mode} code")]
    WritableExecutable { region: u8, mode: Mode },
    #[error("address {address:#010x} is writable in one mode and executable in another via region {region}")]
    CrossModeWritableExecutable { address: u32, region: u8 },
}

/// Checks the W^X policy.
///
/// Reports each region that grants W and X to the same mode, then scans the
/// effective permissions at every region boundary (they are constant between
/// boundaries) for addresses that some mode can write and some mode can
/// execute. Region-level violations are not reported twice.
pub fn validate_wx(regions: &[MpuRegion]) -> Vec<WxViolation> {
    let mut out = Vec::new();
    let mut flagged = BTreeSet::new();
    for r in regions {
        for mode in Mode::ALL {
            let p = r.permission(mode);
            if p.write && p.execute {
                out.push(WxViolation::WritableExecutable { region: r.number, mode });
                flagged.insert(r.number);
            }
        }
    }

    let mut points: BTreeSet<u64> = BTreeSet::new();
    points.insert(0);
    for r in regions.iter().filter(|r| r.enabled) {
        points.insert(r.base as u64);
        points.insert(r.range().end());
    }
    let mut by_priority: Vec<&MpuRegion> = regions.iter().filter(|r| r.enabled).collect();
    by_priority.sort_by_key(|r| std::cmp::Reverse(r.number));
    let mut cross = BTreeSet::new();
    for &p in points.iter().filter(|&&p| p < ADDRESS_SPACE) {
        let address = p as u32;
        if PPB.contains(address) {
            continue;
        }
        let Some(r) = by_priority.iter().find(|r| r.contains(address)) else { continue };
        let writable = Mode::ALL.iter().any(|&m| r.permission(m).write);
        let executable = Mode::ALL.iter().any(|&m| r.permission(m).execute);
        if writable && executable && !flagged.contains(&r.number) && cross.insert(r.number) {
            out.push(WxViolation::CrossModeWritableExecutable { address, region: r.number });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const KB: u64 = 1024;

    fn region(number: u8, base: u32, size: u64, p: Permission, u: Permission) -> MpuRegion {
        MpuRegion::new(number, base, size, p, u)
    }

    fn ev(mode: Mode, kind: AccessKind, address: u32) -> AccessEvent {
        AccessEvent::word(mode, kind, address)
    }

    #[test]
    fn flash_region_is_valid() {
        let r = region(0, 0x0800_0000, 128 * KB, Permission::RX, Permission::RX);
        assert!(validate_region(&r).is_empty());
    }

    #[test]
    fn non_power_of_two_size() {
        let r = region(0, 0x0800_0000, 96 * KB, Permission::RX, Permission::RX);
        assert!(validate_region(&r).contains(&RegionViolation::SizeNotPowerOfTwo(96 * KB)));
    }

    #[test]
    fn privileged_read_only_under_unprivileged_read_write() {
        let r = region(0, 0x2000_0000, 4 * KB, Permission::R, Permission::RW);
        assert_eq!(validate_region(&r), vec![RegionViolation::PrivilegedMoreRestrictive { bit: PermissionBit::Write }]);
    }

    #[test]
    fn size_bounds_and_alignment() {
        let tiny = region(0, 0, 16, Permission::R, Permission::NONE);
        assert!(validate_region(&tiny).contains(&RegionViolation::SizeOutOfRange(16)));
        let whole = region(0, 0, 1 << 32, Permission::RW, Permission::RW);
        assert!(validate_region(&whole).is_empty());
        let skew = region(0, 0x0800_0100, 4 * KB, Permission::R, Permission::R);
        assert_eq!(validate_region(&skew), vec![RegionViolation::Misaligned { base: 0x0800_0100, size: 4 * KB }]);
    }

    #[test]
    fn execute_only_is_not_expressible() {
        let xo = Permission::new(false, false, true);
        let r = region(0, 0x0800_0000, 4 * KB, xo, xo);
        let v = validate_region(&r);
        assert!(v.contains(&RegionViolation::ExecuteWithoutRead { mode: Mode::Privileged }));
        assert!(v.contains(&RegionViolation::ExecuteWithoutRead { mode: Mode::Unprivileged }));
    }

    #[test]
    fn ppb_overrides_regions() {
        let d = evaluate_mpu(&[], &ev(Mode::Privileged, AccessKind::Write, 0xE000_ED08)).unwrap();
        assert!(d.allowed());
        assert_eq!(d.reason(), DecisionReason::PpbFixedRule);
        assert_eq!(d.matched_region(), None);

        let d = evaluate_mpu(&[], &ev(Mode::Unprivileged, AccessKind::Read, 0xE000_ED08)).unwrap();
        assert!(!d.allowed());
        assert_eq!(d.reason(), DecisionReason::PpbFixedRule);

        let all = [region(0, 0, 1 << 32, Permission::RWX, Permission::RWX)];
        let d = evaluate_mpu(&all, &ev(Mode::Privileged, AccessKind::Fetch, 0xE000_0000)).unwrap();
        assert!(!d.allowed());
    }

    #[test]
    fn fetch_in_code_region() {
        let regions = [region(0, 0x0800_0000, 128 * KB, Permission::RX, Permission::NONE)];
        let d = evaluate_mpu(&regions, &ev(Mode::Privileged, AccessKind::Fetch, 0x0800_0100)).unwrap();
        assert!(d.allowed());
        assert_eq!(d.matched_region(), Some(0));
        assert_eq!(d.reason(), DecisionReason::RegionPermission);
    }

    #[test]
    fn highest_number_wins() {
        let regions = [
            region(1, 0x2000_0000, 64 * KB, Permission::RW, Permission::RW),
            region(7, 0x2000_0000, 4 * KB, Permission::R, Permission::R),
        ];
        let d = evaluate_mpu(&regions, &ev(Mode::Privileged, AccessKind::Write, 0x2000_0010)).unwrap();
        assert!(!d.allowed());
        assert_eq!(d.matched_region(), Some(7));
        let d = evaluate_mpu(&regions, &ev(Mode::Privileged, AccessKind::Write, 0x2000_1000)).unwrap();
        assert!(d.allowed());
        assert_eq!(d.matched_region(), Some(1));
    }

    #[test]
    fn disabled_regions_are_ignored_and_unmatched_denies() {
        let mut r = region(3, 0x2000_0000, 4 * KB, Permission::RW, Permission::RW);
        r.enabled = false;
        let d = evaluate_mpu(&[r], &ev(Mode::Privileged, AccessKind::Read, 0x2000_0000)).unwrap();
        assert!(!d.allowed());
        assert_eq!(d.reason(), DecisionReason::NoRegion);
    }

    #[test]
    fn invalid_sets_are_errors() {
        let bad = region(2, 0x0800_0000, 96 * KB, Permission::RX, Permission::RX);
        let e = evaluate_mpu(&[bad], &ev(Mode::Privileged, AccessKind::Read, 0)).unwrap_err();
        assert!(matches!(e, MpuError::InvalidRegion { number: 2, .. }));
        let a = region(1, 0, 32, Permission::R, Permission::R);
        assert_eq!(RegionSet::new(&[a, a]).unwrap_err(), MpuError::DuplicateNumber(1));
    }

    #[test]
    fn event_invariants() {
        assert_eq!(AccessEvent::new(Mode::Privileged, AccessKind::Read, 0, 3), Err(EventError::BadWidth(3)));
        assert!(AccessEvent::new(Mode::Privileged, AccessKind::Read, u32::MAX, 2).is_err());
        assert!(AccessEvent::new(Mode::Privileged, AccessKind::Read, u32::MAX - 3, 4).is_ok());
    }

    #[test]
    fn wx_disjoint_ok_and_rwx_flagged() {
        let ok = [
            region(1, 0x0800_0000, 128 * KB, Permission::RX, Permission::RX),
            region(2, 0x2000_0000, 128 * KB, Permission::RW, Permission::RW),
        ];
        assert!(validate_wx(&ok).is_empty());
        let bad = [region(1, 0x2000_0000, 4 * KB, Permission::RWX, Permission::NONE)];
        assert_eq!(validate_wx(&bad), vec![WxViolation::WritableExecutable { region: 1, mode: Mode::Privileged }]);
    }

    #[test]
    fn wx_cross_mode_detected() {
        let r = region(4, 0x2000_0000, 4 * KB, Permission::RWX, Permission::RW);
        assert_eq!(validate_wx(&[r]), vec![WxViolation::WritableExecutable { region: 4, mode: Mode::Privileged }]);
        // Not a valid region (privileged lacks W), but the scan still catches
        // memory that one mode writes and the other executes.
        let split = region(5, 0x2000_0000, 4 * KB, Permission::RX, Permission::RW);
        assert_eq!(
            validate_wx(&[split]),
            vec![WxViolation::CrossModeWritableExecutable { address: 0x2000_0000, region: 5 }]
        );
    }

    #[test]
    fn permission_text_round_trip() {
        for s in ["---", "r--", "rw-", "r-x", "rwx"] {
            assert_eq!(s.parse::<Permission>().unwrap().to_string(), s);
        }
        assert!("rx".parse::<Permission>().is_err());
    }
}
