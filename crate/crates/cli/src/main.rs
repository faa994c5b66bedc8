//! `xomkit`: plan execute-only protection, replay access traces, rewrite
//! assembly, and run the attack suite.
//!
//! Exit status is 0 on success, 1 for usage and parse errors, and 2 when a
//! plan is rejected, a rewrite is refused, or an attack scenario fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use xomkit::addr::format_size;
use xomkit::config::{ConfigDocument, PlanDocument};
use xomkit::planner::{self, boot_sequence_bytes, emit_boot_sequence, DeviceProfile, PlanError, ProtectionPlan};
use xomkit::rewriter::{self, RewriteReport};
use xomkit::sim::{self, Trace};

#[derive(Parser)]
#[command(name = "xomkit", version, about = "Execute-only memory toolkit for Cortex-M firmware")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Choose a protection option for a firmware layout and emit its boot writes.
    Plan {
        /// TOML file with a [layout] table.
        #[arg(long)]
        layout: PathBuf,
        /// Preset name (stm32f469, armv8m-mainline) or TOML file with a [profile] table.
        #[arg(long)]
        profile: String,
        /// Where to write the plan; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Adjudicate every access of a trace against a plan.
    Check {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        /// Where to write outcomes; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Remove literal pools and jump tables from an assembly file.
    Rewrite {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Print the rewrite report.
        #[arg(long)]
        report: bool,
    },
    /// Run the built-in attack scenarios against a plan.
    Attack {
        #[arg(long)]
        plan: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Rejected(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Rejected(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Rejected(m) => m,
        }
    }
}

type Outcome = Result<(), Failure>;

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn parse_config(path: &Path) -> Result<ConfigDocument, Failure> {
    ConfigDocument::parse(&read(path)?).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn load_profile(arg: &str) -> Result<DeviceProfile, Failure> {
    let path = Path::new(arg);
    if !path.exists() {
        if let Some(p) = DeviceProfile::preset(arg) {
            return Ok(p);
        }
    }
    let doc = parse_config(path)?;
    doc.profile().cloned().map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn load_plan(path: &Path) -> Result<ProtectionPlan, Failure> {
    parse_config(path)?.protection_plan().map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str) -> Outcome {
    match out {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn summary(plan: &ProtectionPlan, profile: &DeviceProfile) -> String {
    let guards = plan.guard_comparators();
    let mut s = format!("option: {}\n", plan.option);
    s += &format!("execution mode: {}\n", plan.execution_mode);
    s += &format!("code: {} ({})\n", plan.code, format_size(plan.code.size));
    s += &format!("code alignment: {:#x}\n", plan.required_code_alignment);
    s += &format!(
        "dwt: {} of {} comparators, {} code chunk(s), {} guard(s)\n",
        plan.dwt.slots_used(),
        profile.dwt_comparators,
        plan.code_chunks.len(),
        guards.len()
    );
    for chunk in &plan.code_chunks {
        s += &format!("  watch {chunk}\n");
    }
    s += &format!("mpu: {} of {} regions\n", plan.mpu_regions.len(), profile.mpu_regions);
    for r in &plan.mpu_regions {
        s += &format!("  region {} {} priv={} unpriv={}\n", r.number, r.range(), r.privileged, r.unprivileged);
    }
    s += &format!("boot sequence: {} writes, {} bytes\n", emit_boot_sequence(plan).len(), boot_sequence_bytes(plan));
    s
}

fn cmd_plan(layout: &Path, profile: &str, out: Option<&Path>) -> Outcome {
    let profile = load_profile(profile)?;
    let doc = parse_config(layout)?;
    let layout = doc.layout().map_err(|e| Failure::Usage(format!("{}: {e}", layout.display())))?;
    let plan = planner::plan(&profile, layout).map_err(|e| match e {
        PlanError::InvalidProfile(_) | PlanError::InvalidLayout(_) => Failure::Usage(e.to_string()),
        _ => Failure::Rejected(format!("rejected: {e}")),
    })?;
    let text = ConfigDocument { plan: Some(PlanDocument::from_plan(&plan)), ..Default::default() }.render();
    match out {
        Some(p) => {
            print!("{}", summary(&plan, &profile));
            write(p, &text)
        }
        None => {
            eprint!("{}", summary(&plan, &profile));
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_check(plan: &Path, trace: &Path, out: Option<&Path>) -> Outcome {
    let plan = load_plan(plan)?;
    let events = Trace::parse(&read(trace)?).map_err(|e| Failure::Usage(format!("{}: {e}", trace.display())))?;
    let outcomes = sim::run_trace(&plan, &events).map_err(|e| Failure::Usage(e.to_string()))?;
    emit(out, &sim::render_outcomes(&outcomes))
}

fn render_report(r: &RewriteReport) -> String {
    format!(
        "loads rewritten: {}\ntables rewritten: {}\nbytes before: {}\nbytes after: {}\nislands remaining: {}\n",
        r.loads_rewritten, r.tables_rewritten, r.bytes_before, r.bytes_after, r.islands_remaining
    )
}

fn cmd_rewrite(input: &Path, out: &Path, report: bool) -> Outcome {
    let text = read(input)?;
    let prog = rewriter::parse(&text).map_err(|e| Failure::Usage(format!("{}: {e}", input.display())))?;
    let (rewritten, r) =
        rewriter::rewrite(&prog).map_err(|e| Failure::Rejected(format!("{}: {e}", input.display())))?;
    if report {
        print!("{}", render_report(&r));
    }
    if r.islands_remaining > 0 {
        return Err(Failure::Rejected(format!(
            "{}: {} constant island(s) remain; output not written",
            input.display(),
            r.islands_remaining
        )));
    }
    write(out, &rewritten.render())
}

fn cmd_attack(plan: &Path) -> Outcome {
    let plan = load_plan(plan)?;
    let reports = sim::attack_suite(&plan).map_err(|e| Failure::Usage(e.to_string()))?;
    print!("{}", sim::render_scenarios(&reports));
    let failed = reports.iter().filter(|r| !r.pass).count();
    if failed > 0 {
        return Err(Failure::Rejected(format!("{failed} scenario(s) failed")));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Plan { layout, profile, out } => cmd_plan(layout, profile, out.as_deref()),
        Command::Check { plan, trace, out } => cmd_check(plan, trace, out.as_deref()),
        Command::Rewrite { input, out, report } => cmd_rewrite(input, out, *report),
        Command::Attack { plan } => cmd_attack(plan),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
