//! Property tests for the MPU, DWT, planner, simulator and rewriter
//! invariants. Expected values come from independent formulations (interval
//! arithmetic, explicit permission tables), not from the code under test.

use proptest::prelude::*;

use xomkit::addr::AddrRange;
use xomkit::dwt::{
    dwt_match, mask_for_size, Arch, Comparator, ComparatorPairV8, ComparatorV7, Demcr, DwtConfig, WatchKind,
};
use xomkit::mpu::{evaluate_mpu, validate_region, validate_wx, AccessEvent, AccessKind, Mode, MpuRegion, Permission};
use xomkit::planner::{
    apply_boot_sequence, emit_boot_sequence, plan, DeviceProfile, FirmwareLayout, PlanOption, ProtectionPlan,
};
use xomkit::rewriter::{interpret, parse, rewrite, MachineState};
use xomkit::sim::{ResultKind, Simulator};

const KB: u64 = 1024;
const PPB_BASE: u32 = 0xE000_0000;
const PPB_LAST: u32 = 0xE000_FFFF;

fn mode() -> impl Strategy<Value = Mode> {
    prop_oneof![Just(Mode::Privileged), Just(Mode::Unprivileged)]
}

fn kind() -> impl Strategy<Value = AccessKind> {
    prop_oneof![Just(AccessKind::Read), Just(AccessKind::Write), Just(AccessKind::Fetch)]
}

fn permission() -> impl Strategy<Value = Permission> {
    (any::<bool>(), any::<bool>(), any::<bool>()).prop_map(|(r, w, x)| Permission::new(r, w, x))
}

/// A region that passes validation: aligned power-of-two span, privileged
/// permissions cover unprivileged ones, execute implies read.
fn region(number: u8) -> impl Strategy<Value = MpuRegion> {
    (5u32..=32, any::<u32>(), permission(), permission()).prop_map(move |(log, base, p, u)| {
        let size = 1u64 << log;
        let base = if log == 32 { 0 } else { base & !((size - 1) as u32) };
        let fix = |x: Permission| Permission::new(x.read || x.execute, x.write, x.execute);
        let u = fix(u);
        let p = fix(Permission::new(p.read || u.read, p.write || u.write, p.execute || u.execute));
        MpuRegion::new(number, base, size, p, u)
    })
}

fn regions() -> impl Strategy<Value = Vec<MpuRegion>> {
    proptest::collection::vec(any::<bool>(), 0..8).prop_flat_map(|present| {
        let picked: Vec<u8> = present.iter().enumerate().filter(|(_, p)| **p).map(|(i, _)| i as u8).collect();
        picked.into_iter().map(region).collect::<Vec<_>>()
    })
}

fn allows(p: Permission, kind: AccessKind) -> bool {
    match kind {
        AccessKind::Read => p.read,
        AccessKind::Write => p.write,
        AccessKind::Fetch => p.execute,
    }
}

proptest! {
    #[test]
    fn ppb_decisions_ignore_regions(regs in regions(), m in mode(), k in kind(), off in 0u32..=0xFFFF) {
        let event = AccessEvent::byte(m, k, PPB_BASE + off);
        let with = evaluate_mpu(&regs, &event).unwrap();
        let without = evaluate_mpu(&[], &event).unwrap();
        prop_assert_eq!(with.allowed(), without.allowed());
        let expected = m == Mode::Privileged && k != AccessKind::Fetch;
        prop_assert_eq!(with.allowed(), expected);
        prop_assert_eq!(evaluate_mpu(&regs, &event).unwrap(), with);
    }

    #[test]
    fn highest_region_decides(regs in regions(), m in mode(), k in kind(), addr in any::<u32>()) {
        prop_assume!(!(PPB_BASE..=PPB_LAST).contains(&addr));
        let event = AccessEvent::byte(m, k, addr);
        let winner = regs.iter().filter(|r| r.range().contains(addr)).max_by_key(|r| r.number);
        let expected = winner.map(|r| {
            allows(if m == Mode::Privileged { r.privileged } else { r.unprivileged }, k)
        }).unwrap_or(false);
        prop_assert_eq!(evaluate_mpu(&regs, &event).unwrap().allowed(), expected);
    }

    #[test]
    fn granting_a_bit_never_denies(
        regs in regions(), m in mode(), k in kind(), addr in any::<u32>(), bit in 0usize..3, to_unpriv in any::<bool>()
    ) {
        let event = AccessEvent::byte(m, k, addr);
        let before = evaluate_mpu(&regs, &event).unwrap();
        let Some(n) = before.matched_region() else { return Ok(()) };
        let mut widened = regs.clone();
        let r = widened.iter_mut().find(|r| r.number == n).unwrap();
        let grant = |p: &mut Permission| match bit {
            0 => p.read = true,
            1 => p.write = true,
            _ => { p.execute = true; p.read = true; }
        };
        grant(&mut r.privileged);
        if to_unpriv {
            grant(&mut r.unprivileged);
        }
        prop_assume!(validate_region(r).is_empty());
        let after = evaluate_mpu(&widened, &event).unwrap();
        prop_assert!(!before.allowed() || after.allowed());
    }

    #[test]
    fn accepted_regions_never_execute_only(log in 5u32..=32, base in any::<u32>(), p in permission(), u in permission()) {
        let size = 1u64 << log;
        let base = if log == 32 { 0 } else { base & !((size - 1) as u32) };
        let r = MpuRegion::new(0, base, size, p, u);
        if validate_region(&r).is_empty() {
            prop_assert!(!p.execute || p.read);
            prop_assert!(!u.execute || u.read);
        }
    }

    #[test]
    fn v7_mask_formula_is_interval(mask in 0u8..=31, comp in any::<u32>(), addr in any::<u32>(), near in any::<bool>()) {
        let span = 1u64 << mask;
        let comp = comp & !((span - 1) as u32);
        let addr = if near { (comp as u64 + addr as u64 % (2 * span)).min(u32::MAX as u64) as u32 } else { addr };
        let c = ComparatorV7 { index: 0, comp, mask, function: WatchKind::ReadWrite };
        let inside = addr as u64 >= comp as u64 && (addr as u64) < comp as u64 + span;
        prop_assert_eq!(c.matches_address(addr), inside);
    }

    #[test]
    fn v7_v8_parity_exhaustive_small_masks(mask in 0u8..=8, comp in any::<u32>()) {
        let span = 1u64 << mask;
        let comp = comp & !((span - 1) as u32);
        let v7 = ComparatorV7 { index: 0, comp, mask, function: WatchKind::Read };
        let v8 = ComparatorPairV8 { index: 0, lower: comp, upper: (comp as u64 + span - 1) as u32, function: WatchKind::Read };
        let lo = (comp as u64).saturating_sub(span);
        let hi = (comp as u64 + 2 * span).min(1 << 32);
        for a in lo..hi {
            prop_assert_eq!(v7.matches_address(a as u32), v8.matches_address(a as u32));
        }
    }

    #[test]
    fn adding_a_comparator_keeps_matches(
        specs in proptest::collection::vec((any::<u32>(), 0u8..=15), 2..=4), addr in any::<u32>(), k in kind(), m in mode()
    ) {
        let comps: Vec<Comparator> = specs.iter().enumerate().map(|(i, (c, mask))| {
            Comparator::V7(ComparatorV7 {
                index: i as u8,
                comp: c & !((1u32 << mask) - 1),
                mask: *mask,
                function: WatchKind::ReadWrite,
            })
        }).collect();
        let demcr = Demcr { mon_en: true };
        let fewer = DwtConfig::new(Arch::V7m, comps[..comps.len() - 1].to_vec(), demcr, 15, 4).unwrap();
        let all = DwtConfig::new(Arch::V7m, comps, demcr, 15, 4).unwrap();
        let event = AccessEvent::byte(m, k, addr);
        if dwt_match(&fewer, &event).exception.is_some() {
            prop_assert!(dwt_match(&all, &event).exception.is_some());
        }
        if k == AccessKind::Fetch {
            prop_assert!(dwt_match(&all, &event).exception.is_none());
        }
    }

    #[test]
    fn mask_for_size_is_minimal(size in 1u64..=(1 << 20)) {
        let m = mask_for_size(size, 31).unwrap();
        prop_assert!(1u64 << m >= size);
        prop_assert!(m == 0 || 1u64 << (m - 1) < size);
    }
}

fn layout(base_offset: u32, size: u64) -> FirmwareLayout {
    FirmwareLayout {
        code: AddrRange::new(0x0800_0000 + base_offset, size),
        rodata: AddrRange::new(0x0810_0000, 4 * KB),
        ram: AddrRange::new(0x2000_0000, 64 * KB),
        uses_privileged_ops: false,
    }
}

fn planned() -> impl Strategy<Value = (ProtectionPlan, DeviceProfile)> {
    let stm = (1u64..=128 * KB).prop_map(|size| (DeviceProfile::stm32f469(), layout(0, size)));
    let v8 = (1u64..=512 * KB, 0u32..64)
        .prop_map(|(size, slot)| (DeviceProfile::armv8m_mainline(), layout(slot * 32, size)));
    prop_oneof![stm, v8].prop_filter_map("plannable", |(profile, l)| plan(&profile, &l).ok().map(|p| (p, profile)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn plans_are_sound((p, profile) in planned(), samples in proptest::collection::vec(any::<u64>(), 64)) {
        let sim = Simulator::new(&p).unwrap();
        let exec = p.execution_mode;
        let mut addrs: Vec<u32> = samples.iter().map(|s| (p.code.base as u64 + s % p.code.size) as u32).collect();
        addrs.push(p.code.base);
        addrs.push(p.code.last().unwrap());
        for a in addrs {
            for m in [Mode::Privileged, Mode::Unprivileged] {
                prop_assert!(sim.adjudicate(&AccessEvent::byte(m, AccessKind::Read, a)).result.is_trap());
                prop_assert_eq!(sim.adjudicate(&AccessEvent::byte(m, AccessKind::Write, a)).result, ResultKind::MemManageFault);
            }
            prop_assert_eq!(sim.adjudicate(&AccessEvent::byte(exec, AccessKind::Fetch, a)).result, ResultKind::Allowed);
        }
        for a in [0x2000_0000u32, 0x2000_8000, 0x2000_FFFC] {
            for m in [Mode::Privileged, Mode::Unprivileged] {
                prop_assert_ne!(sim.adjudicate(&AccessEvent::word(m, AccessKind::Fetch, a)).result, ResultKind::Allowed);
            }
        }
        prop_assert!(validate_wx(&p.mpu_regions).is_empty());
        prop_assert!(p.dwt.slots_used() <= profile.dwt_comparators);
        prop_assert!(p.mpu_regions.len() <= profile.mpu_regions);
        prop_assert_eq!(plan(&profile, &layout(p.code.base - 0x0800_0000, p.code.size)).unwrap(), p.clone());
    }

    #[test]
    fn guards_hold((p, _) in planned(), off in 0u32..=0xFFF, scb in 0u32..=0xFF) {
        let sim = Simulator::new(&p).unwrap();
        let targets = [0xE000_1000 + off, 0xE000_ED00 + scb, 0xE000_EDFC];
        match p.option {
            PlanOption::PrivilegedWithGuards => {
                for a in targets {
                    let r = sim.adjudicate(&AccessEvent::byte(Mode::Privileged, AccessKind::Write, a)).result;
                    prop_assert_eq!(r, ResultKind::DebugMonitorException);
                }
            }
            PlanOption::UnprivilegedFullBudget => {
                for a in [PPB_BASE + off * 16 + scb % 16, PPB_LAST] {
                    for k in [AccessKind::Read, AccessKind::Write, AccessKind::Fetch] {
                        let r = sim.adjudicate(&AccessEvent::byte(Mode::Unprivileged, k, a)).result;
                        prop_assert_eq!(r, ResultKind::MemManageFault);
                    }
                }
            }
        }
    }

    #[test]
    fn boot_writes_rebuild_the_plan((p, profile) in planned()) {
        let state = apply_boot_sequence(&emit_boot_sequence(&p), profile.arch, profile.max_mask, profile.dwt_comparators).unwrap();
        prop_assert!(state.mpu_enabled);
        prop_assert_eq!(state.mpu_regions, p.mpu_regions);
        prop_assert_eq!(state.dwt, p.dwt);
    }
}

proptest! {
    #[test]
    fn load_constant_round_trip(c in any::<u32>(), rd in 0u8..13, shared in any::<bool>()) {
        let text = if shared {
            format!("f:\n\tldr r{rd}, .Lc\n\tldr r{}, .Lc\n\thalt\n\t.p2align 2\n.Lc:\n\t.word {c:#x}\n", (rd + 1) % 13)
        } else {
            format!("f:\n\tldr r{rd}, ={c:#x}\n\thalt\n")
        };
        let original = parse(&text).unwrap();
        let (rewritten, report) = rewrite(&original).unwrap();
        prop_assert_eq!(report.islands_remaining, 0);
        prop_assert_eq!(report.loads_rewritten, if shared { 2 } else { 1 });
        let movt = rewritten.instructions().filter(|i| i.mnemonic == "movt").count();
        prop_assert_eq!(movt > 0, c >> 16 != 0);
        let a = interpret(&original, &MachineState::new(), 100).unwrap();
        let b = interpret(&rewritten, &MachineState::new(), 100).unwrap();
        prop_assert_eq!(b.reg(rd as usize), c);
        prop_assert_eq!(a.regs, {
            let mut r = b.regs;
            r[15] = a.regs[15];
            r
        });
        prop_assert!(!a.island_reads.is_empty());
        prop_assert!(b.island_reads.is_empty());
        let (again, _) = rewrite(&rewritten).unwrap();
        prop_assert_eq!(again, rewritten);
    }
}
