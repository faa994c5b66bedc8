//! Protection planning: turns a device profile and a firmware layout into MPU
//! regions and DWT comparator assignments that together make the code region
//! execute-only.
//!
//! The MPU enforces W^X: code is `r-x`, read-only data `r--`, RAM `rw-`, and a
//! lowest-priority background region grants `rw-` to everything else. The MPU
//! cannot express execute-only, so DWT comparators watching data reads over the
//! code turn every code read into a debug monitor exception.
//!
//! The DWT and system-control registers are themselves memory mapped. Two
//! layouts protect them:
//!
//! * [`PlanOption::PrivilegedWithGuards`]: the application stays privileged and
//!   two extra comparators write-watch the DWT block and the SCB/DEMCR block.
//! * [`PlanOption::UnprivilegedFullBudget`]: the application runs unprivileged,
//!   which the PPB rule already shuts out of every system register, and all
//!   comparators are free to watch code.
//!
//! On ARMv7-M each comparator covers an aligned power-of-two window of at most
//! `2^max_mask` bytes, so the comparator budget bounds the code size. The guard
//! option is preferred whenever the code fits in what remains after the guards.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::addr::{format_size, AddrRange, ADDRESS_SPACE};
use crate::dwt::{Arch, Comparator, ComparatorPairV8, ComparatorV7, Demcr, DwtConfig, DwtError, WatchKind};
use crate::mpu::{validate_wx, Mode, MpuRegion, Permission, RegionSet, MIN_REGION_SIZE};

const KB: u64 = 1024;

/// DWT register block on ARMv7-M.
pub const DWT_REGISTERS: AddrRange = AddrRange::inclusive(0xE000_1000, 0xE000_1FFF);
/// SCB (`0xE000_ED00..=0xE000_ED8F`) plus DEMCR (`0xE000_EDFC`) as one
/// 256-byte window.
pub const SCB_AND_DEMCR: AddrRange = AddrRange::inclusive(0xE000_ED00, 0xE000_EDFF);
/// Number of system-register guard ranges.
const GUARD_COUNT: usize = 2;

/// Code bytes per register write in the boot-time configuration routine:
/// MOVW/MOVT for the address, MOVW/MOVT for the value, and a 16-bit STR.
pub const BOOT_WRITE_BYTES: u64 = 4 + 4 + 4 + 4 + 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub name: String,
    pub arch: Arch,
    pub mpu_regions: usize,
    pub dwt_comparators: usize,
    /// Largest DWT_MASK value; ARMv7-M only.
    #[serde(default)]
    pub max_mask: u8,
    pub flash: AddrRange,
    pub sram: AddrRange,
}

impl DeviceProfile {
    /// STM32F469 Discovery: Cortex-M4, 8 MPU regions, 4 DWT comparators of at
    /// most 32 KB each.
    pub fn stm32f469() -> Self {
        DeviceProfile {
            name: "stm32f469".into(),
            arch: Arch::V7m,
            mpu_regions: 8,
            dwt_comparators: 4,
            max_mask: 15,
            flash: AddrRange::new(0x0800_0000, 2048 * KB),
            sram: AddrRange::new(0x2000_0000, 384 * KB),
        }
    }

    /// A generic ARMv8-M Mainline part with 8 comparators (4 range pairs).
    pub fn armv8m_mainline() -> Self {
        DeviceProfile {
            name: "armv8m-mainline".into(),
            arch: Arch::V8m,
            mpu_regions: 8,
            dwt_comparators: 8,
            max_mask: 0,
            flash: AddrRange::new(0x0800_0000, 2048 * KB),
            sram: AddrRange::new(0x2000_0000, 256 * KB),
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "stm32f469" => Some(Self::stm32f469()),
            "armv8m-mainline" => Some(Self::armv8m_mainline()),
            _ => None,
        }
    }

    /// Bytes one v7 comparator can watch.
    pub fn comparator_span(&self) -> u64 {
        1u64 << self.max_mask
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        let bad = |m: String| Err(PlanError::InvalidProfile(m));
        if self.mpu_regions == 0 || self.dwt_comparators == 0 {
            return bad("MPU region and DWT comparator counts must be at least 1".into());
        }
        if self.arch == Arch::V7m && self.max_mask > crate::dwt::ARCH_MAX_MASK {
            return bad(format!("max_mask {} exceeds 31", self.max_mask));
        }
        if !self.flash.fits_address_space() || !self.sram.fits_address_space() {
            return bad("flash or SRAM range exceeds the address space".into());
        }
        if self.flash.overlaps(&self.sram) {
            return bad(format!("flash {} overlaps SRAM {}", self.flash, self.sram));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FirmwareLayout {
    pub code: AddrRange,
    pub rodata: AddrRange,
    pub ram: AddrRange,
    #[serde(default)]
    pub uses_privileged_ops: bool,
}

impl FirmwareLayout {
    pub fn validate(&self, profile: &DeviceProfile) -> Result<(), PlanError> {
        let bad = |m: String| Err(PlanError::InvalidLayout(m));
        if self.code.size == 0 {
            return bad("code section is empty".into());
        }
        for (name, sect, within) in [
            ("code", &self.code, &profile.flash),
            ("rodata", &self.rodata, &profile.flash),
            ("ram", &self.ram, &profile.sram),
        ] {
            if sect.size > 0 && !within.contains_range(sect) {
                return bad(format!("{name} {sect} lies outside {within}"));
            }
            if !(sect.base as u64).is_multiple_of(MIN_REGION_SIZE) {
                return bad(format!("{name} base {:#010x} is not 32-byte aligned", sect.base));
            }
        }
        for (name, sect) in [("rodata", &self.rodata), ("ram", &self.ram)] {
            if sect.size % MIN_REGION_SIZE != 0 {
                return bad(format!("{name} size {:#x} is not a multiple of 32 bytes", sect.size));
            }
        }
        if self.code.overlaps(&self.rodata) || self.code.overlaps(&self.ram) || self.rodata.overlaps(&self.ram) {
            return bad("code, rodata and ram must be disjoint".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuardName {
    DwtRegisters,
    ScbAndDemcr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GuardRange {
    pub name: GuardName,
    pub range: AddrRange,
    pub function: WatchKind,
}

impl GuardRange {
    pub const ALL: [GuardRange; GUARD_COUNT] = [
        GuardRange { name: GuardName::DwtRegisters, range: DWT_REGISTERS, function: WatchKind::Write },
        GuardRange { name: GuardName::ScbAndDemcr, range: SCB_AND_DEMCR, function: WatchKind::Write },
    ];
}

impl fmt::Display for GuardName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GuardName::DwtRegisters => "dwt_registers",
            GuardName::ScbAndDemcr => "scb_and_demcr",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanOption {
    UnprivilegedFullBudget,
    PrivilegedWithGuards,
}

impl PlanOption {
    pub fn execution_mode(&self) -> Mode {
        match self {
            PlanOption::UnprivilegedFullBudget => Mode::Unprivileged,
            PlanOption::PrivilegedWithGuards => Mode::Privileged,
        }
    }
}

impl fmt::Display for PlanOption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PlanOption::UnprivilegedFullBudget => "unprivileged_full_budget",
            PlanOption::PrivilegedWithGuards => "privileged_with_guards",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("invalid device profile: {0}")]
    InvalidProfile(String),
    #[error("invalid firmware layout: {0}")]
    InvalidLayout(String),
    #[error("code size {} ({code_size} bytes) exceeds the {} limit", format_size(*code_size), format_size(*limit))]
    Reject { code_size: u64, limit: u64 },
    #[error(
        "code size {} needs unprivileged execution, but the application uses privileged operations (guarded limit {})",
        format_size(*code_size),
        format_size(*limit)
    )]
    Infeasible { code_size: u64, limit: u64 },
    #[error("code at {base:#010x} needs {needed} comparators to tile but only {available} are available; align the code base to {alignment:#x}")]
    CodeMisaligned { base: u32, needed: usize, available: usize, alignment: u64 },
    #[error("plan needs {needed} MPU regions, device has {available}")]
    MpuBudget { needed: usize, available: usize },
    #[error("padded code window {padded} overlaps {section}")]
    PaddingOverlap { padded: AddrRange, section: &'static str },
    #[error(transparent)]
    Dwt(#[from] DwtError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanInvariantError {
    #[error("MPU regions invalid: {0}")]
    Regions(String),
    #[error("W^X violated: {0}")]
    WriteXorExecute(String),
    #[error("code byte {0:#010x} is not watched for reads")]
    CodeUnwatched(u32),
    #[error("guard {0} has no write-watching comparator")]
    MissingGuard(GuardName),
    #[error("execution mode {mode} does not match option {option}")]
    ModeMismatch { option: PlanOption, mode: Mode },
    #[error("DEMCR.MON_EN is clear")]
    MonitorDisabled,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProtectionPlan {
    pub option: PlanOption,
    pub execution_mode: Mode,
    pub code: AddrRange,
    pub mpu_regions: Vec<MpuRegion>,
    pub dwt: DwtConfig,
    pub required_code_alignment: u64,
    pub code_chunks: Vec<AddrRange>,
}

impl ProtectionPlan {
    /// Comparators guarding system registers, keyed by guard.
    pub fn guard_comparators(&self) -> Vec<(GuardName, u8)> {
        GuardRange::ALL
            .iter()
            .filter_map(|g| {
                self.dwt
                    .comparators()
                    .iter()
                    .find(|c| c.function().watches(crate::mpu::AccessKind::Write) && c.range().contains_range(&g.range))
                    .map(|c| (g.name, c.index()))
            })
            .collect()
    }

    /// Comparators whose function watches reads.
    pub fn code_comparators(&self) -> impl Iterator<Item = &Comparator> {
        self.dwt.comparators().iter().filter(|c| c.function().watches(crate::mpu::AccessKind::Read))
    }

    /// Checks the structural invariants every plan must satisfy, whether built
    /// by [`plan`] or loaded from a file.
    pub fn validate(&self) -> Result<(), PlanInvariantError> {
        RegionSet::new(&self.mpu_regions).map_err(|e| PlanInvariantError::Regions(e.to_string()))?;
        let wx = validate_wx(&self.mpu_regions);
        if let Some(v) = wx.first() {
            return Err(PlanInvariantError::WriteXorExecute(v.to_string()));
        }
        if self.option.execution_mode() != self.execution_mode {
            return Err(PlanInvariantError::ModeMismatch { option: self.option, mode: self.execution_mode });
        }
        if !self.dwt.demcr().mon_en {
            return Err(PlanInvariantError::MonitorDisabled);
        }
        let mut watched: Vec<AddrRange> = self.code_comparators().map(|c| c.range()).collect();
        watched.sort();
        let mut cursor = self.code.base as u64;
        for r in &watched {
            if r.base as u64 <= cursor && r.end() > cursor {
                cursor = r.end();
            }
        }
        if cursor < self.code.end() {
            return Err(PlanInvariantError::CodeUnwatched(cursor as u32));
        }
        if self.option == PlanOption::PrivilegedWithGuards {
            let present = self.guard_comparators();
            for g in GuardRange::ALL {
                if !present.iter().any(|(n, _)| *n == g.name) {
                    return Err(PlanInvariantError::MissingGuard(g.name));
                }
            }
        }
        Ok(())
    }
}

fn lowest_set_bit(x: u64) -> u64 {
    if x == 0 {
        ADDRESS_SPACE
    } else {
        x & x.wrapping_neg()
    }
}

fn prev_power_of_two(x: u64) -> u64 {
    1u64 << (63 - x.leading_zeros())
}

/// Tiles `code` with aligned power-of-two windows of at most `span` bytes,
/// largest aligned window first. The last window is rounded up to a power of
/// two and may extend past the end of the code.
pub fn tile_code(code: AddrRange, span: u64) -> Vec<AddrRange> {
    let mut chunks = Vec::new();
    let mut cursor = code.base as u64;
    let end = code.end();
    while cursor < end {
        let align = lowest_set_bit(cursor).min(span);
        let remaining = end - cursor;
        if remaining <= align {
            chunks.push(AddrRange::new(cursor as u32, remaining.next_power_of_two()));
            break;
        }
        chunks.push(AddrRange::new(cursor as u32, align));
        cursor += align;
    }
    chunks
}

/// Exact cover of `range` by aligned power-of-two blocks of at least 32 bytes.
/// `range` must be 32-byte aligned at both ends.
fn mpu_blocks(range: AddrRange) -> Vec<AddrRange> {
    let mut out = Vec::new();
    let mut cursor = range.base as u64;
    let end = range.end();
    while cursor < end {
        let size = lowest_set_bit(cursor).min(prev_power_of_two(end - cursor));
        out.push(AddrRange::new(cursor as u32, size));
        cursor += size;
    }
    out
}

fn round_up(x: u64, to: u64) -> u64 {
    x.div_ceil(to) * to
}

/// Chooses and builds the protection configuration for `layout` on `profile`.
pub fn plan(profile: &DeviceProfile, layout: &FirmwareLayout) -> Result<ProtectionPlan, PlanError> {
    profile.validate()?;
    layout.validate(profile)?;
    let code = layout.code;
    let budget = profile.dwt_comparators;
    let demcr = Demcr { mon_en: true };

    let (option, code_chunks, required_code_alignment, mut comparators) = match profile.arch {
        Arch::V7m => {
            let span = profile.comparator_span();
            let chunks = tile_code(code, span);
            let guarded_slots = budget.saturating_sub(GUARD_COUNT);
            let guarded_limit = guarded_slots as u64 * span;
            let full_limit = budget as u64 * span;
            let option = if code.size <= guarded_limit && chunks.len() <= guarded_slots {
                PlanOption::PrivilegedWithGuards
            } else if code.size <= full_limit {
                if chunks.len() > budget {
                    return Err(PlanError::CodeMisaligned {
                        base: code.base,
                        needed: chunks.len(),
                        available: budget,
                        alignment: code.size.next_power_of_two().min(span),
                    });
                }
                if layout.uses_privileged_ops {
                    return Err(PlanError::Infeasible { code_size: code.size, limit: guarded_limit });
                }
                PlanOption::UnprivilegedFullBudget
            } else {
                return Err(PlanError::Reject { code_size: code.size, limit: full_limit });
            };
            let comparators = chunks
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    Ok(Comparator::V7(ComparatorV7 {
                        index: i as u8,
                        comp: c.base,
                        mask: crate::dwt::mask_for_size(c.size, profile.max_mask)?,
                        function: WatchKind::Read,
                    }))
                })
                .collect::<Result<Vec<_>, DwtError>>()?;
            let align = chunks.iter().map(|c| c.size).max().unwrap_or(1);
            (option, chunks, align, comparators)
        }
        Arch::V8m => {
            let pairs = budget / 2;
            if pairs == 0 {
                return Err(PlanError::Reject { code_size: code.size, limit: 0 });
            }
            let option = if pairs > GUARD_COUNT {
                PlanOption::PrivilegedWithGuards
            } else if layout.uses_privileged_ops {
                return Err(PlanError::Infeasible { code_size: code.size, limit: 0 });
            } else {
                PlanOption::UnprivilegedFullBudget
            };
            let pair = Comparator::V8(ComparatorPairV8 {
                index: 0,
                lower: code.base,
                upper: code.last().expect("non-empty code"),
                function: WatchKind::Read,
            });
            (option, vec![code], MIN_REGION_SIZE, vec![pair])
        }
    };

    if option == PlanOption::PrivilegedWithGuards {
        for g in GuardRange::ALL {
            let next = comparators.iter().map(|c| c.index() + c.slots() as u8).max().unwrap_or(0);
            comparators.push(match profile.arch {
                Arch::V7m => Comparator::V7(ComparatorV7 {
                    index: next,
                    comp: g.range.base,
                    mask: crate::dwt::mask_for_size(g.range.size, profile.max_mask)?,
                    function: g.function,
                }),
                Arch::V8m => Comparator::V8(ComparatorPairV8 {
                    index: next,
                    lower: g.range.base,
                    upper: g.range.last().expect("non-empty guard"),
                    function: g.function,
                }),
            });
        }
    }
    let dwt = DwtConfig::new(profile.arch, comparators, demcr, profile.max_mask, budget)?;

    let chunk_end = code_chunks.iter().map(AddrRange::end).max().unwrap_or(code.end());
    let padded = AddrRange::new(code.base, round_up(chunk_end, MIN_REGION_SIZE) - code.base as u64);
    if !profile.flash.contains_range(&padded) {
        return Err(PlanError::PaddingOverlap { padded, section: "the end of flash" });
    }
    for (name, sect) in [("rodata", &layout.rodata), ("ram", &layout.ram)] {
        if padded.overlaps(sect) {
            return Err(PlanError::PaddingOverlap { padded, section: name });
        }
    }

    let mpu_regions = build_regions(option, padded, layout);
    if mpu_regions.len() > profile.mpu_regions {
        return Err(PlanError::MpuBudget { needed: mpu_regions.len(), available: profile.mpu_regions });
    }

    let plan = ProtectionPlan {
        option,
        execution_mode: option.execution_mode(),
        code,
        mpu_regions,
        dwt,
        required_code_alignment,
        code_chunks,
    };
    debug_assert_eq!(plan.validate(), Ok(()));
    Ok(plan)
}

fn build_regions(option: PlanOption, padded_code: AddrRange, layout: &FirmwareLayout) -> Vec<MpuRegion> {
    let unpriv = |p: Permission| match option {
        PlanOption::UnprivilegedFullBudget => p,
        PlanOption::PrivilegedWithGuards => Permission::NONE,
    };
    let mut regions = vec![MpuRegion::new(0, 0, ADDRESS_SPACE, Permission::RW, unpriv(Permission::RW))];
    let sections = [(padded_code, Permission::RX), (layout.rodata, Permission::R), (layout.ram, Permission::RW)];
    for (range, perm) in sections {
        if range.size == 0 {
            continue;
        }
        for block in mpu_blocks(range) {
            let number = regions.len() as u8;
            regions.push(MpuRegion::new(number, block.base, block.size, perm, unpriv(perm)));
        }
    }
    regions
}

/// One register write performed by the boot-time configuration routine.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterWrite {
    pub register: String,
    pub value: String,
    pub comment: String,
}

impl RegisterWrite {
    fn new(register: impl Into<String>, value: impl Into<String>, comment: impl Into<String>) -> Self {
        RegisterWrite { register: register.into(), value: value.into(), comment: comment.into() }
    }
}

fn describe_comparator(plan: &ProtectionPlan, c: &Comparator) -> String {
    if let Some((g, _)) = plan.guard_comparators().into_iter().find(|(_, i)| *i == c.index()) {
        return format!("guard {g} {}", c.range());
    }
    format!("code watch {}", c.range())
}

/// Register writes in boot order: each comparator's COMP, then MASK (v7) or
/// the upper-bound COMP (v8), then FUNC; then `DEMCR.MON_EN`; then the MPU
/// regions and the MPU enable.
pub fn emit_boot_sequence(plan: &ProtectionPlan) -> Vec<RegisterWrite> {
    let mut out = Vec::new();
    for c in plan.dwt.comparators() {
        let what = describe_comparator(plan, c);
        match c {
            Comparator::V7(v) => {
                let n = v.index;
                out.push(RegisterWrite::new(
                    format!("DWT_COMP{n}"),
                    format!("{:#010x}", v.comp),
                    format!("{what}: base"),
                ));
                out.push(RegisterWrite::new(
                    format!("DWT_MASK{n}"),
                    v.mask.to_string(),
                    format!("{what}: 2^{} = {}", v.mask, format_size(v.span())),
                ));
                out.push(RegisterWrite::new(
                    format!("DWT_FUNC{n}"),
                    v.function.as_str(),
                    format!("{what}: trap on {}", v.function),
                ));
            }
            Comparator::V8(p) => {
                let n = p.index;
                out.push(RegisterWrite::new(
                    format!("DWT_COMP{n}"),
                    format!("{:#010x}", p.lower),
                    format!("{what}: lower bound"),
                ));
                out.push(RegisterWrite::new(
                    format!("DWT_COMP{}", n + 1),
                    format!("{:#010x}", p.upper),
                    format!("{what}: upper bound (inclusive)"),
                ));
                out.push(RegisterWrite::new(
                    format!("DWT_FUNC{n}"),
                    p.function.as_str(),
                    format!("{what}: trap on {}", p.function),
                ));
                out.push(RegisterWrite::new(
                    format!("DWT_FUNC{}", n + 1),
                    p.function.as_str(),
                    format!("{what}: range limit"),
                ));
            }
        }
    }
    out.push(RegisterWrite::new("DEMCR.MON_EN", "1", "enable the debug monitor exception (bit 16)"));
    for r in &plan.mpu_regions {
        let value = format!(
            "base={:#010x} size={:#010x} priv={} unpriv={}{}",
            r.base,
            r.size,
            r.privileged,
            r.unprivileged,
            if r.enabled { "" } else { " disabled" }
        );
        out.push(RegisterWrite::new(format!("MPU_REGION{}", r.number), value, region_comment(plan, r)));
    }
    out.push(RegisterWrite::new("MPU_CTRL.ENABLE", "1", "enable the MPU"));
    out
}

fn region_comment(plan: &ProtectionPlan, r: &MpuRegion) -> String {
    if r.size == ADDRESS_SPACE {
        return "background: peripherals and unlisted memory".into();
    }
    let range = r.range();
    let padded_end = plan.code_chunks.iter().map(AddrRange::end).max().unwrap_or(plan.code.end());
    if range.base as u64 >= plan.code.base as u64 && range.end() <= round_up(padded_end, MIN_REGION_SIZE) {
        return format!("code {range}");
    }
    if r.privileged.write {
        format!("ram {range}")
    } else {
        format!("rodata {range}")
    }
}

/// Size of the boot-time configuration code for `plan`.
pub fn boot_sequence_bytes(plan: &ProtectionPlan) -> u64 {
    emit_boot_sequence(plan).len() as u64 * BOOT_WRITE_BYTES
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BootError {
    #[error("unknown register `{0}`")]
    UnknownRegister(String),
    #[error("bad value `{value}` for {register}")]
    BadValue { register: String, value: String },
    #[error("{0} written without a matching DWT_COMP")]
    Incomplete(String),
    #[error(transparent)]
    Dwt(#[from] DwtError),
}

/// Device state reconstructed from a register-write list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BootState {
    pub mpu_regions: Vec<MpuRegion>,
    pub dwt: DwtConfig,
    pub mpu_enabled: bool,
}

/// Replays register writes against a register-file model to recover the MPU
/// and DWT configuration they program.
pub fn apply_boot_sequence(
    writes: &[RegisterWrite],
    arch: Arch,
    max_mask: u8,
    comparator_budget: usize,
) -> Result<BootState, BootError> {
    use std::collections::BTreeMap;

    let bad = |w: &RegisterWrite| BootError::BadValue { register: w.register.clone(), value: w.value.clone() };
    let mut comp: BTreeMap<u8, u32> = BTreeMap::new();
    let mut mask: BTreeMap<u8, u8> = BTreeMap::new();
    let mut func: BTreeMap<u8, WatchKind> = BTreeMap::new();
    let mut regions: BTreeMap<u8, MpuRegion> = BTreeMap::new();
    let mut mon_en = false;
    let mut mpu_enabled = false;

    for w in writes {
        let reg = w.register.as_str();
        let index = |prefix: &str| reg.strip_prefix(prefix).and_then(|n| n.parse::<u8>().ok());
        if let Some(n) = index("DWT_COMP") {
            let v = crate::addr::parse_u64(&w.value).and_then(|v| u32::try_from(v).ok()).ok_or_else(|| bad(w))?;
            comp.insert(n, v);
        } else if let Some(n) = index("DWT_MASK") {
            mask.insert(n, w.value.trim().parse().map_err(|_| bad(w))?);
        } else if let Some(n) = index("DWT_FUNC") {
            func.insert(n, w.value.trim().parse().map_err(|_| bad(w))?);
        } else if let Some(n) = index("MPU_REGION") {
            regions.insert(n, parse_region(n, &w.value).ok_or_else(|| bad(w))?);
        } else if reg == "DEMCR.MON_EN" {
            mon_en = parse_flag(&w.value).ok_or_else(|| bad(w))?;
        } else if reg == "MPU_CTRL.ENABLE" {
            mpu_enabled = parse_flag(&w.value).ok_or_else(|| bad(w))?;
        } else {
            return Err(BootError::UnknownRegister(w.register.clone()));
        }
    }

    let mut comparators = Vec::new();
    match arch {
        Arch::V7m => {
            for (&n, &function) in &func {
                let c = *comp.get(&n).ok_or_else(|| BootError::Incomplete(format!("DWT_FUNC{n}")))?;
                let m = *mask.get(&n).ok_or_else(|| BootError::Incomplete(format!("DWT_FUNC{n}")))?;
                comparators.push(Comparator::V7(ComparatorV7 { index: n, comp: c, mask: m, function }));
            }
        }
        Arch::V8m => {
            for (&n, &function) in func.iter().filter(|(n, _)| *n % 2 == 0) {
                let lower = *comp.get(&n).ok_or_else(|| BootError::Incomplete(format!("DWT_FUNC{n}")))?;
                let upper = *comp.get(&(n + 1)).ok_or_else(|| BootError::Incomplete(format!("DWT_FUNC{n}")))?;
                comparators.push(Comparator::V8(ComparatorPairV8 { index: n, lower, upper, function }));
            }
        }
    }
    let dwt = DwtConfig::new(arch, comparators, Demcr { mon_en }, max_mask, comparator_budget)?;
    Ok(BootState { mpu_regions: regions.into_values().collect(), dwt, mpu_enabled })
}

fn parse_flag(v: &str) -> Option<bool> {
    match v.trim() {
        "1" => Some(true),
        "0" => Some(false),
        _ => None,
    }
}

fn parse_region(number: u8, value: &str) -> Option<MpuRegion> {
    let mut region = MpuRegion::new(number, 0, 0, Permission::NONE, Permission::NONE);
    let (mut base, mut size, mut p, mut u) = (None, None, None, None);
    for field in value.split_whitespace() {
        match field.split_once('=') {
            Some(("base", v)) => base = crate::addr::parse_u64(v).and_then(|v| u32::try_from(v).ok()),
            Some(("size", v)) => size = crate::addr::parse_u64(v),
            Some(("priv", v)) => p = v.parse().ok(),
            Some(("unpriv", v)) => u = v.parse().ok(),
            None if field == "disabled" => region.enabled = false,
            _ => return None,
        }
    }
    region.base = base?;
    region.size = size?;
    region.privileged = p?;
    region.unprivileged = u?;
    Some(region)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(code_size: u64) -> FirmwareLayout {
        FirmwareLayout {
            code: AddrRange::new(0x0800_0000, code_size),
            rodata: AddrRange::new(0x0810_0000, 16 * KB),
            ram: AddrRange::new(0x2000_0000, 128 * KB),
            uses_privileged_ops: false,
        }
    }

    #[test]
    fn sixty_kb_uses_guards() {
        let p = plan(&DeviceProfile::stm32f469(), &layout(60 * KB)).unwrap();
        assert_eq!(p.option, PlanOption::PrivilegedWithGuards);
        assert_eq!(p.execution_mode, Mode::Privileged);
        assert_eq!(p.code_chunks, vec![AddrRange::new(0x0800_0000, 32 * KB), AddrRange::new(0x0800_8000, 32 * KB)]);
        assert_eq!(p.required_code_alignment, 32 * KB);
        assert_eq!(p.code_comparators().count(), 2);
        assert_eq!(p.guard_comparators().len(), 2);
        assert_eq!(p.dwt.slots_used(), 4);
    }

    #[test]
    fn hundred_kb_runs_unprivileged() {
        let p = plan(&DeviceProfile::stm32f469(), &layout(100 * KB)).unwrap();
        assert_eq!(p.option, PlanOption::UnprivilegedFullBudget);
        assert_eq!(p.execution_mode, Mode::Unprivileged);
        assert_eq!(p.code_comparators().count(), 4);
        assert!(p.guard_comparators().is_empty());
    }

    #[test]
    fn over_128_kb_rejected() {
        let e = plan(&DeviceProfile::stm32f469(), &layout(130 * KB)).unwrap_err();
        assert_eq!(e, PlanError::Reject { code_size: 130 * KB, limit: 128 * KB });
        assert!(e.to_string().contains("128 KB"));
    }

    #[test]
    fn privileged_ops_cannot_be_demoted() {
        let mut l = layout(100 * KB);
        l.uses_privileged_ops = true;
        assert_eq!(
            plan(&DeviceProfile::stm32f469(), &l).unwrap_err(),
            PlanError::Infeasible { code_size: 100 * KB, limit: 64 * KB }
        );
        l.code.size = 60 * KB;
        assert!(plan(&DeviceProfile::stm32f469(), &l).is_ok());
    }

    #[test]
    fn v8_single_pair() {
        let p = plan(&DeviceProfile::armv8m_mainline(), &layout(200 * KB)).unwrap();
        assert_eq!(p.option, PlanOption::PrivilegedWithGuards);
        let first = p.dwt.comparators()[0];
        assert_eq!(
            first,
            Comparator::V8(ComparatorPairV8 {
                index: 0,
                lower: 0x0800_0000,
                upper: 0x0803_1FFF,
                function: WatchKind::Read
            })
        );
        assert_eq!(p.dwt.slots_used(), 6);
    }

    #[test]
    fn v8_small_budget_falls_back_to_unprivileged() {
        let mut profile = DeviceProfile::armv8m_mainline();
        profile.dwt_comparators = 4;
        let p = plan(&profile, &layout(200 * KB)).unwrap();
        assert_eq!(p.option, PlanOption::UnprivilegedFullBudget);
        profile.dwt_comparators = 1;
        assert!(matches!(plan(&profile, &layout(4 * KB)), Err(PlanError::Reject { .. })));
    }

    #[test]
    fn tiling_is_minimal_and_aligned() {
        let span = 32 * KB;
        let t = tile_code(AddrRange::new(0x0800_0000, 64 * KB + 4), span);
        assert_eq!(
            t,
            vec![AddrRange::new(0x0800_0000, span), AddrRange::new(0x0800_8000, span), AddrRange::new(0x0801_0000, 4)]
        );
        let t = tile_code(AddrRange::new(0x0800_7000, 8 * KB), span);
        assert_eq!(t, vec![AddrRange::new(0x0800_7000, 4 * KB), AddrRange::new(0x0800_8000, 4 * KB)]);
        assert_eq!(tile_code(AddrRange::new(0x0800_0000, 1000), span), vec![AddrRange::new(0x0800_0000, 1024)]);
    }

    #[test]
    fn misaligned_code_is_reported() {
        let mut l = layout(120 * KB);
        l.code.base = 0x0800_0020;
        assert!(matches!(plan(&DeviceProfile::stm32f469(), &l), Err(PlanError::CodeMisaligned { .. })));
    }

    #[test]
    fn padding_must_not_cover_rodata() {
        let mut l = layout(60 * KB);
        l.rodata = AddrRange::new(0x0800_F000, 4 * KB);
        assert!(matches!(
            plan(&DeviceProfile::stm32f469(), &l),
            Err(PlanError::PaddingOverlap { section: "rodata", .. })
        ));
    }

    #[test]
    fn boot_sequence_order() {
        let p = plan(&DeviceProfile::stm32f469(), &layout(100 * KB)).unwrap();
        let seq = emit_boot_sequence(&p);
        let names: Vec<&str> = seq.iter().map(|w| w.register.as_str()).collect();
        assert_eq!(
            &names[..13],
            &[
                "DWT_COMP0",
                "DWT_MASK0",
                "DWT_FUNC0",
                "DWT_COMP1",
                "DWT_MASK1",
                "DWT_FUNC1",
                "DWT_COMP2",
                "DWT_MASK2",
                "DWT_FUNC2",
                "DWT_COMP3",
                "DWT_MASK3",
                "DWT_FUNC3",
                "DEMCR.MON_EN"
            ]
        );
        assert!(names[13..].iter().filter(|n| n.starts_with("MPU_REGION")).count() >= 4);
        assert!(seq.iter().filter(|w| w.register.starts_with("DWT_FUNC")).all(|w| w.value == "read"));
    }

    #[test]
    fn guard_plan_has_two_write_comparators() {
        let p = plan(&DeviceProfile::stm32f469(), &layout(60 * KB)).unwrap();
        let seq = emit_boot_sequence(&p);
        let writes = seq.iter().filter(|w| w.register.starts_with("DWT_FUNC") && w.value == "write").count();
        assert_eq!(writes, 2);
    }

    #[test]
    fn boot_sequence_replays_to_the_same_configuration() {
        for (profile, size) in [
            (DeviceProfile::stm32f469(), 60 * KB),
            (DeviceProfile::stm32f469(), 100 * KB),
            (DeviceProfile::armv8m_mainline(), 200 * KB),
        ] {
            let p = plan(&profile, &layout(size)).unwrap();
            let state =
                apply_boot_sequence(&emit_boot_sequence(&p), profile.arch, profile.max_mask, profile.dwt_comparators)
                    .unwrap();
            assert_eq!(state.mpu_regions, p.mpu_regions);
            assert_eq!(state.dwt, p.dwt);
            assert!(state.mpu_enabled);
        }
    }

    #[test]
    fn boot_replay_rejects_garbage() {
        let w = RegisterWrite::new("NVIC_ISER0", "1", "");
        assert_eq!(apply_boot_sequence(&[w], Arch::V7m, 15, 4), Err(BootError::UnknownRegister("NVIC_ISER0".into())));
        let w = RegisterWrite::new("DWT_FUNC0", "read", "");
        assert!(matches!(apply_boot_sequence(&[w], Arch::V7m, 15, 4), Err(BootError::Incomplete(_))));
    }

    #[test]
    fn every_plan_passes_wx() {
        for size in [1, 4 * KB, 33 * KB, 64 * KB, 64 * KB + 4, 128 * KB] {
            let p = plan(&DeviceProfile::stm32f469(), &layout(size)).unwrap();
            assert!(validate_wx(&p.mpu_regions).is_empty());
            assert_eq!(p.validate(), Ok(()));
        }
    }
}
