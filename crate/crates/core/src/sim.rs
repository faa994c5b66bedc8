//! Access-trace replay against a protection plan.
//!
//! Each access goes through the MPU (with the fixed PPB rule) first; a denial
//! is a MemManage fault. Data accesses the MPU allows are then checked against
//! the DWT comparators, and a hit is a debug monitor exception. Faults never
//! stop replay and events are independent of each other.

use std::fmt;

use thiserror::Error;

use crate::dwt::{dwt_match, matching_comparator, DwtLint};
use crate::mpu::{AccessEvent, AccessKind, DecisionReason, Mode, RegionSet, PPB};
use crate::planner::{PlanInvariantError, PlanOption, ProtectionPlan, DWT_REGISTERS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ResultKind {
    Allowed,
    MemManageFault,
    DebugMonitorException,
}

impl ResultKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ResultKind::Allowed => "allowed",
            ResultKind::MemManageFault => "mem_manage_fault",
            ResultKind::DebugMonitorException => "debug_monitor_exception",
        }
    }

    pub fn is_trap(&self) -> bool {
        !matches!(self, ResultKind::Allowed)
    }
}

impl fmt::Display for ResultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What decided the outcome.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Detail {
    Region(u8),
    PpbRule,
    NoRegion,
    Comparator(u8),
}

impl fmt::Display for Detail {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Detail::Region(n) => write!(f, "mpu_region{n}"),
            Detail::PpbRule => f.write_str("ppb_rule"),
            Detail::NoRegion => f.write_str("no_region"),
            Detail::Comparator(n) => write!(f, "dwt_comparator{n}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Lint {
    /// The access's first and last bytes fall under different protection;
    /// only the first byte was adjudicated.
    Straddle {
        first: u32,
        last: u32,
    },
    Dwt(DwtLint),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AccessOutcome {
    pub event: AccessEvent,
    pub result: ResultKind,
    pub detail: Detail,
    pub lints: Vec<Lint>,
}

/// A plan prepared for repeated adjudication.
#[derive(Clone, Debug)]
pub struct Simulator<'a> {
    plan: &'a ProtectionPlan,
    regions: RegionSet,
}

impl<'a> Simulator<'a> {
    pub fn new(plan: &'a ProtectionPlan) -> Result<Self, PlanInvariantError> {
        plan.validate()?;
        let regions = RegionSet::new(&plan.mpu_regions).map_err(|e| PlanInvariantError::Regions(e.to_string()))?;
        Ok(Simulator { plan, regions })
    }

    pub fn adjudicate(&self, event: &AccessEvent) -> AccessOutcome {
        let mut lints = Vec::new();
        let decision = self.regions.evaluate(event);
        if event.width() > 1 {
            let last = AccessEvent::byte(event.mode(), event.kind(), event.last_byte());
            let first = AccessEvent::byte(event.mode(), event.kind(), event.address());
            let cfg = &self.plan.dwt;
            if self.regions.evaluate(&last) != decision
                || matching_comparator(cfg, &last).map(|c| c.index())
                    != matching_comparator(cfg, &first).map(|c| c.index())
            {
                lints.push(Lint::Straddle { first: event.address(), last: event.last_byte() });
            }
        }
        let mpu_detail = match decision.reason() {
            DecisionReason::RegionPermission => Detail::Region(decision.matched_region().expect("region decision")),
            DecisionReason::PpbFixedRule => Detail::PpbRule,
            DecisionReason::NoRegion => Detail::NoRegion,
        };
        if !decision.allowed() {
            return AccessOutcome { event: *event, result: ResultKind::MemManageFault, detail: mpu_detail, lints };
        }
        let m = dwt_match(&self.plan.dwt, event);
        if let Some(lint) = m.lint {
            lints.push(Lint::Dwt(lint));
        }
        match m.exception {
            Some(exc) => AccessOutcome {
                event: *event,
                result: ResultKind::DebugMonitorException,
                detail: Detail::Comparator(exc.comparator),
                lints,
            },
            None => AccessOutcome { event: *event, result: ResultKind::Allowed, detail: mpu_detail, lints },
        }
    }

    pub fn run(&self, trace: &Trace) -> Vec<AccessOutcome> {
        trace.events.iter().map(|e| self.adjudicate(e)).collect()
    }
}

/// Adjudicates a single access: MPU/PPB first, then DWT for data accesses.
pub fn adjudicate(plan: &ProtectionPlan, event: &AccessEvent) -> Result<AccessOutcome, PlanInvariantError> {
    Ok(Simulator::new(plan)?.adjudicate(event))
}

pub fn run_trace(plan: &ProtectionPlan, trace: &Trace) -> Result<Vec<AccessOutcome>, PlanInvariantError> {
    Ok(Simulator::new(plan)?.run(trace))
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Trace {
    pub events: Vec<AccessEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("trace line {line}: {reason}")]
pub struct TraceError {
    pub line: usize,
    pub reason: String,
}

fn mode_char(m: Mode) -> char {
    match m {
        Mode::Privileged => 'P',
        Mode::Unprivileged => 'U',
    }
}

fn kind_char(k: AccessKind) -> char {
    match k {
        AccessKind::Read => 'R',
        AccessKind::Write => 'W',
        AccessKind::Fetch => 'X',
    }
}

fn format_event(e: &AccessEvent) -> String {
    format!("{} {} {:#010x} {}", mode_char(e.mode()), kind_char(e.kind()), e.address(), e.width())
}

impl Trace {
    /// Parses `<P|U> <R|W|X> <hex address> <width>` lines. Blank lines and
    /// `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Trace, TraceError> {
        let mut events = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |reason: String| TraceError { line, reason };
            let fields: Vec<&str> = content.split_whitespace().collect();
            let [mode, kind, addr, width] = fields[..] else {
                return Err(err(format!("expected 4 fields, found {}", fields.len())));
            };
            let mode = match mode {
                "P" => Mode::Privileged,
                "U" => Mode::Unprivileged,
                m => return Err(err(format!("unknown mode `{m}`"))),
            };
            let kind = match kind {
                "R" => AccessKind::Read,
                "W" => AccessKind::Write,
                "X" => AccessKind::Fetch,
                k => return Err(err(format!("unknown access kind `{k}`"))),
            };
            let hex = addr.strip_prefix("0x").or_else(|| addr.strip_prefix("0X")).unwrap_or(addr);
            let address =
                u32::from_str_radix(&hex.replace('_', ""), 16).map_err(|_| err(format!("bad address `{addr}`")))?;
            let width: u8 = width.parse().map_err(|_| err(format!("bad width `{width}`")))?;
            events.push(AccessEvent::new(mode, kind, address, width).map_err(|e| err(e.to_string()))?);
        }
        Ok(Trace { events })
    }

    pub fn render(&self) -> String {
        self.events.iter().map(|e| format_event(e) + "\n").collect()
    }
}

/// One line per outcome: the trace line followed by the result column.
pub fn render_outcomes(outcomes: &[AccessOutcome]) -> String {
    outcomes.iter().map(|o| format!("{} {}\n", format_event(&o.event), o.result)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Observed {
    Uniform(ResultKind),
    Mixed { allowed: usize, mem_manage_faults: usize, debug_monitor_exceptions: usize },
}

impl fmt::Display for Observed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Observed::Uniform(k) => write!(f, "{k}"),
            Observed::Mixed { allowed, mem_manage_faults, debug_monitor_exceptions } => write!(
                f,
                "mixed (allowed {allowed}, mem_manage_fault {mem_manage_faults}, debug_monitor_exception {debug_monitor_exceptions})"
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScenarioReport {
    pub name: &'static str,
    pub events: usize,
    pub expected: ResultKind,
    pub observed: Observed,
    pub pass: bool,
}

fn observe(outcomes: &[AccessOutcome]) -> Observed {
    let count = |k| outcomes.iter().filter(|o| o.result == k).count();
    let (a, m, d) =
        (count(ResultKind::Allowed), count(ResultKind::MemManageFault), count(ResultKind::DebugMonitorException));
    match (a, m, d) {
        (_, 0, 0) => Observed::Uniform(ResultKind::Allowed),
        (0, _, 0) => Observed::Uniform(ResultKind::MemManageFault),
        (0, 0, _) => Observed::Uniform(ResultKind::DebugMonitorException),
        _ => Observed::Mixed { allowed: a, mem_manage_faults: m, debug_monitor_exceptions: d },
    }
}

pub const MPU_REGISTERS_FIRST: u32 = 0xE000_ED90;
pub const MPU_REGISTERS_LAST: u32 = 0xE000_EDA3;
pub const DEMCR: u32 = 0xE000_EDFC;
pub const VTOR: u32 = 0xE000_ED08;

/// Runs the fixed attack scenarios as the plan's execution mode, i.e. as a
/// compromised application with an arbitrary read/write primitive.
pub fn attack_suite(plan: &ProtectionPlan) -> Result<Vec<ScenarioReport>, PlanInvariantError> {
    let sim = Simulator::new(plan)?;
    let mode = plan.execution_mode;
    let register_trap = match plan.option {
        PlanOption::PrivilegedWithGuards => ResultKind::DebugMonitorException,
        PlanOption::UnprivilegedFullBudget => ResultKind::MemManageFault,
    };
    let code_words = |kind| -> Vec<AccessEvent> {
        plan.code
            .addresses(4)
            .map(|a| AccessEvent::new(mode, kind, a, 4).unwrap_or(AccessEvent::byte(mode, kind, a)))
            .collect()
    };
    let writes = |first: u32, last: u32| -> Vec<AccessEvent> {
        (first..=last).step_by(4).map(|a| AccessEvent::word(mode, AccessKind::Write, a)).collect()
    };
    let scenarios: Vec<(&'static str, Vec<AccessEvent>, ResultKind)> = vec![
        ("code_disclosure", code_words(AccessKind::Read), ResultKind::DebugMonitorException),
        ("code_injection", code_words(AccessKind::Write), ResultKind::MemManageFault),
        ("mpu_register_tamper", writes(MPU_REGISTERS_FIRST, MPU_REGISTERS_LAST), register_trap),
        ("dwt_register_tamper", writes(DWT_REGISTERS.base, DWT_REGISTERS.last().expect("non-empty")), register_trap),
        ("demcr_tamper", writes(DEMCR, DEMCR), register_trap),
        ("vtor_overwrite", writes(VTOR, VTOR), register_trap),
    ];
    debug_assert!(PPB.contains(DEMCR) && PPB.contains(VTOR));
    Ok(scenarios
        .into_iter()
        .map(|(name, events, expected)| {
            let outcomes: Vec<_> = events.iter().map(|e| sim.adjudicate(e)).collect();
            let observed = observe(&outcomes);
            ScenarioReport {
                name,
                events: events.len(),
                expected,
                observed,
                pass: observed == Observed::Uniform(expected),
            }
        })
        .collect())
}

/// Fixed-width table of scenario results.
pub fn render_scenarios(reports: &[ScenarioReport]) -> String {
    let mut out = format!("{:<22} {:>6}  {:<24} {:<24} {}\n", "scenario", "events", "expected", "observed", "status");
    for r in reports {
        out.push_str(&format!(
            "{:<22} {:>6}  {:<24} {:<24} {}\n",
            r.name,
            r.events,
            r.expected.as_str(),
            r.observed.to_string(),
            if r.pass { "PASS" } else { "FAIL" }
        ));
    }
    out
}
