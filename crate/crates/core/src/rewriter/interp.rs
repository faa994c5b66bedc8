//! Reference interpreter for the assembly subset.
//!
//! Code sits at [`CODE_BASE`] in the layout computed by [`Layout`]; a flat
//! little-endian data memory of [`DATA_SIZE`] bytes sits at [`DATA_BASE`].
//! Reading pc yields the instruction address plus 4. Every data read that
//! lands inside the code image is recorded as an [`IslandRead`].

use thiserror::Error;

use super::layout::Layout;
use super::parse::{condition, reglist};
use super::{AsmItem, AsmProgram, Instr, MemOffset, Operand, Reg, ShiftKind};

pub const CODE_BASE: u32 = 0x0800_0000;
pub const DATA_BASE: u32 = 0x2000_0000;
pub const DATA_SIZE: usize = 256;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Flags {
    pub n: bool,
    pub z: bool,
    pub c: bool,
    pub v: bool,
}

/// A data read from the code image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IslandRead {
    pub pc: u32,
    pub address: u32,
    pub width: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MachineState {
    /// r0-r12, sp, lr, pc.
    pub regs: [u32; 16],
    pub flags: Flags,
    pub memory: Vec<u8>,
    pub halted: bool,
    pub island_reads: Vec<IslandRead>,
    pub steps: u64,
}

impl Default for MachineState {
    fn default() -> Self {
        let mut regs = [0; 16];
        regs[Reg::SP.index()] = DATA_BASE + DATA_SIZE as u32;
        MachineState {
            regs,
            flags: Flags::default(),
            memory: vec![0; DATA_SIZE],
            halted: false,
            island_reads: Vec::new(),
            steps: 0,
        }
    }
}

impl MachineState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_regs(regs: &[(usize, u32)]) -> Self {
        let mut s = Self::default();
        for &(r, v) in regs {
            s.regs[r] = v;
        }
        s
    }

    pub fn reg(&self, r: usize) -> u32 {
        self.regs[r]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InterpError {
    #[error("stuck at {pc:#010x}: {reason}")]
    Stuck { pc: u32, reason: String },
    #[error("cannot build code image: {0}")]
    Image(String),
}

/// Address of the program's entry label, or the start of code.
pub fn entry_address(prog: &AsmProgram) -> u32 {
    let layout = Layout::new(prog, CODE_BASE);
    prog.entry.as_deref().and_then(|e| layout.label(e)).unwrap_or(CODE_BASE)
}

struct Machine<'a> {
    prog: &'a AsmProgram,
    layout: Layout,
    image: Vec<u8>,
    s: MachineState,
    /// Address of the executing instruction.
    at: u32,
}

type Step = Result<(), String>;

fn cond_holds(cc: &str, f: Flags) -> bool {
    match cc {
        "eq" => f.z,
        "ne" => !f.z,
        "cs" | "hs" => f.c,
        "cc" | "lo" => !f.c,
        "mi" => f.n,
        "pl" => !f.n,
        "vs" => f.v,
        "vc" => !f.v,
        "hi" => f.c && !f.z,
        "ls" => !f.c || f.z,
        "ge" => f.n == f.v,
        "lt" => f.n != f.v,
        "gt" => !f.z && f.n == f.v,
        "le" => f.z || f.n != f.v,
        _ => true,
    }
}

fn shift(kind: ShiftKind, v: u32, amount: u32) -> u32 {
    let amount = amount & 0xff;
    match kind {
        ShiftKind::Lsl => {
            if amount >= 32 {
                0
            } else {
                v << amount
            }
        }
        ShiftKind::Lsr => {
            if amount >= 32 {
                0
            } else {
                v >> amount
            }
        }
        ShiftKind::Asr => ((v as i32) >> amount.min(31)) as u32,
    }
}

fn add_with_carry(a: u32, b: u32, carry: bool) -> (u32, bool, bool) {
    let wide = a as u64 + b as u64 + carry as u64;
    let r = wide as u32;
    let v = ((a ^ r) & (b ^ r)) >> 31 == 1;
    (r, wide > u32::MAX as u64, v)
}

impl Machine<'_> {
    fn read_reg(&self, r: Reg) -> u32 {
        if r == Reg::PC {
            self.at.wrapping_add(4)
        } else {
            self.s.regs[r.index()]
        }
    }

    fn write_reg(&mut self, r: Reg, v: u32) -> Step {
        if r == Reg::PC {
            return Err("write to pc outside a branch".into());
        }
        self.s.regs[r.index()] = v;
        Ok(())
    }

    fn label(&self, name: &str) -> Result<u32, String> {
        self.layout.label(name).ok_or_else(|| format!("undefined label `{name}`"))
    }

    fn in_code(&self, addr: u32, width: u32) -> bool {
        addr >= self.layout.base && (addr - self.layout.base) as u64 + width as u64 <= self.layout.size as u64
    }

    fn data_offset(&self, addr: u32, width: u32) -> Result<usize, String> {
        let off = addr.wrapping_sub(DATA_BASE) as usize;
        if addr >= DATA_BASE && off + width as usize <= DATA_SIZE {
            Ok(off)
        } else {
            Err(format!("access to unmapped address {addr:#010x}"))
        }
    }

    fn load(&mut self, addr: u32, width: u32) -> Result<u32, String> {
        let bytes = if self.in_code(addr, width) {
            self.s.island_reads.push(IslandRead { pc: self.at, address: addr, width: width as u8 });
            let off = (addr - self.layout.base) as usize;
            &self.image[off..off + width as usize]
        } else {
            let off = self.data_offset(addr, width)?;
            &self.s.memory[off..off + width as usize]
        };
        let mut word = [0u8; 4];
        word[..width as usize].copy_from_slice(bytes);
        Ok(u32::from_le_bytes(word))
    }

    fn store(&mut self, addr: u32, width: u32, v: u32) -> Step {
        let off = self.data_offset(addr, width)?;
        self.s.memory[off..off + width as usize].copy_from_slice(&v.to_le_bytes()[..width as usize]);
        Ok(())
    }

    fn address(&self, op: &Operand) -> Result<u32, String> {
        let Operand::Mem { base, offset } = op else { return Err(format!("expected memory operand, found `{op}`")) };
        let b = if *base == Reg::PC { self.read_reg(Reg::PC) & !3 } else { self.read_reg(*base) };
        Ok(match offset {
            MemOffset::None => b,
            MemOffset::Imm(i) => b.wrapping_add(*i as u32),
            MemOffset::Reg { index, shift } => b.wrapping_add(self.read_reg(*index) << shift),
        })
    }

    /// Value of a flexible second operand: immediate, or register with an
    /// optional shift.
    fn operand2(&self, ops: &[Operand]) -> Result<u32, String> {
        match ops {
            [Operand::Imm(i)] => Ok(*i as u32),
            [Operand::Reg(r)] => Ok(self.read_reg(*r)),
            [Operand::Reg(r), Operand::Shift { kind, amount }] => Ok(shift(*kind, self.read_reg(*r), *amount as u32)),
            _ => Err("unsupported operand form".into()),
        }
    }

    fn reg_op(ops: &[Operand], i: usize) -> Result<Reg, String> {
        match ops.get(i) {
            Some(Operand::Reg(r)) => Ok(*r),
            other => Err(format!("expected register operand, found {other:?}")),
        }
    }

    fn interwork(&mut self, target: u32) -> Result<Option<u32>, String> {
        if target & 1 == 0 {
            return Err(format!("branch to {target:#010x} would leave Thumb state"));
        }
        Ok(Some(target & !1))
    }

    fn set_nz(&mut self, r: u32) {
        self.s.flags.n = r >> 31 == 1;
        self.s.flags.z = r == 0;
    }

    /// Executes one instruction; returns the branch target, if any.
    fn exec(&mut self, ins: &Instr) -> Result<Option<u32>, String> {
        let ops = ins.operands.as_slice();
        let base = ins.base();
        let setflags = base.len() > 3 && base.ends_with('s');
        match base {
            "halt" => {
                self.s.halted = true;
                Ok(None)
            }
            "nop" => Ok(None),
            "movw" => match ops {
                [Operand::Reg(d), Operand::Imm(i)] if (0..=0xffff).contains(i) => {
                    self.write_reg(*d, *i as u32).map(|_| None)
                }
                _ => Err("movw needs a 16-bit immediate".into()),
            },
            "movt" => match ops {
                [Operand::Reg(d), Operand::Imm(i)] if (0..=0xffff).contains(i) => {
                    let v = (self.read_reg(*d) & 0xffff) | ((*i as u32) << 16);
                    self.write_reg(*d, v).map(|_| None)
                }
                _ => Err("movt needs a 16-bit immediate".into()),
            },
            "mov" | "movs" | "mvn" | "mvns" => {
                let d = Self::reg_op(ops, 0)?;
                let mut v = self.operand2(&ops[1..])?;
                if base.starts_with("mvn") {
                    v = !v;
                }
                if setflags {
                    self.set_nz(v);
                }
                self.write_reg(d, v).map(|_| None)
            }
            "add" | "adds" | "sub" | "subs" | "cmp" => {
                let (d, a, b) = match (base, ops) {
                    ("cmp", [Operand::Reg(n), rest @ ..]) => (None, self.read_reg(*n), self.operand2(rest)?),
                    (_, [Operand::Reg(d), Operand::Reg(n), rest @ ..])
                        if !rest.is_empty() && !matches!(rest[0], Operand::Shift { .. }) =>
                    {
                        (Some(*d), self.read_reg(*n), self.operand2(rest)?)
                    }
                    (_, [Operand::Reg(d), rest @ ..]) => (Some(*d), self.read_reg(*d), self.operand2(rest)?),
                    _ => return Err("unsupported operand form".into()),
                };
                let (r, c, v) =
                    if base.starts_with("add") { add_with_carry(a, b, false) } else { add_with_carry(a, !b, true) };
                if setflags || base == "cmp" {
                    self.set_nz(r);
                    self.s.flags.c = c;
                    self.s.flags.v = v;
                }
                match d {
                    Some(d) => self.write_reg(d, r).map(|_| None),
                    None => Ok(None),
                }
            }
            "orr" | "orrs" | "and" | "ands" | "eor" | "eors" | "mul" | "muls" | "lsl" | "lsls" | "lsr" | "lsrs"
            | "asr" | "asrs" => {
                let op = &base[..3];
                let d = Self::reg_op(ops, 0)?;
                let (a, b) = match ops {
                    [_, Operand::Reg(n), rest @ ..]
                        if !rest.is_empty() && !matches!(rest[0], Operand::Shift { .. }) =>
                    {
                        (self.read_reg(*n), self.operand2(rest)?)
                    }
                    [_, rest @ ..] => (self.read_reg(d), self.operand2(rest)?),
                    _ => return Err("unsupported operand form".into()),
                };
                let r = match op {
                    "orr" => a | b,
                    "and" => a & b,
                    "eor" => a ^ b,
                    "mul" => a.wrapping_mul(b),
                    "lsl" => shift(ShiftKind::Lsl, a, b),
                    "lsr" => shift(ShiftKind::Lsr, a, b),
                    _ => shift(ShiftKind::Asr, a, b),
                };
                if setflags {
                    self.set_nz(r);
                }
                self.write_reg(d, r).map(|_| None)
            }
            "b" => match ops {
                [Operand::Label(l)] => {
                    let t = self.label(l)?;
                    Ok(Some(t))
                }
                _ => Err("b needs a label".into()),
            },
            "bl" => match ops {
                [Operand::Label(l)] => {
                    let t = self.label(l)?;
                    self.s.regs[Reg::LR.index()] = self.at.wrapping_add(ins.width as u32) | 1;
                    Ok(Some(t))
                }
                _ => Err("bl needs a label".into()),
            },
            "bx" => {
                let r = Self::reg_op(ops, 0)?;
                let t = self.read_reg(r);
                self.interwork(t)
            }
            "adr" => match ops {
                [Operand::Reg(d), Operand::Label(l)] => {
                    let t = self.label(l)?;
                    self.write_reg(*d, t).map(|_| None)
                }
                _ => Err("adr needs a register and a label".into()),
            },
            "ldr" | "ldrh" | "ldrb" => {
                let d = Self::reg_op(ops, 0)?;
                let width = match base {
                    "ldr" => 4,
                    "ldrh" => 2,
                    _ => 1,
                };
                let addr = match &ops[1..] {
                    [Operand::Literal(_)] if base == "ldr" => {
                        let idx = self.layout.instr_at(self.prog, self.at).expect("executing instruction exists");
                        self.layout.literal_slots[&idx]
                    }
                    [Operand::Label(l)] => self.label(l)?,
                    [m @ Operand::Mem { .. }] => self.address(m)?,
                    _ => return Err("unsupported load form".into()),
                };
                let v = self.load(addr, width)?;
                self.write_reg(d, v).map(|_| None)
            }
            "str" | "strh" | "strb" => {
                let d = Self::reg_op(ops, 0)?;
                let width = match base {
                    "str" => 4,
                    "strh" => 2,
                    _ => 1,
                };
                let addr = self.address(ops.get(1).ok_or("store needs an address")?)?;
                let v = self.read_reg(d);
                self.store(addr, width, v).map(|_| None)
            }
            "tbb" | "tbh" => {
                let Some(Operand::Mem { base: rn, offset: MemOffset::Reg { index, .. } }) = ops.first() else {
                    return Err("unsupported table branch form".into());
                };
                let table = self.read_reg(*rn);
                let i = self.read_reg(*index);
                let entry = if base == "tbb" {
                    self.load(table.wrapping_add(i), 1)?
                } else {
                    self.load(table.wrapping_add(i.wrapping_mul(2)), 2)?
                };
                Ok(Some(self.at.wrapping_add(4).wrapping_add(2 * entry)))
            }
            "push" => {
                let regs = ops.first().and_then(reglist).ok_or("bad register list")?;
                let mut sp = self.s.regs[Reg::SP.index()].wrapping_sub(4 * regs.len() as u32);
                self.s.regs[Reg::SP.index()] = sp;
                for r in regs {
                    let v = self.read_reg(r);
                    self.store(sp, 4, v)?;
                    sp = sp.wrapping_add(4);
                }
                Ok(None)
            }
            "pop" => {
                let regs = ops.first().and_then(reglist).ok_or("bad register list")?;
                let mut sp = self.s.regs[Reg::SP.index()];
                let mut target = None;
                for r in regs {
                    let v = self.load(sp, 4)?;
                    sp = sp.wrapping_add(4);
                    if r == Reg::PC {
                        target = self.interwork(v)?;
                    } else {
                        self.s.regs[r.index()] = v;
                    }
                }
                self.s.regs[Reg::SP.index()] = sp;
                Ok(target)
            }
            b => match condition(b) {
                Some(cc) => match ops {
                    [Operand::Label(l)] => {
                        let t = self.label(l)?;
                        Ok(cond_holds(cc, self.s.flags).then_some(t))
                    }
                    _ => Err("conditional branch needs a label".into()),
                },
                None => Err(format!("`{}` has no modelled semantics", ins.mnemonic)),
            },
        }
    }
}

/// Runs `prog` from its entry label for at most `fuel` instructions.
///
/// Stops early on `halt`. Running out of fuel is not an error: the returned
/// state simply has `halted == false`.
pub fn interpret(prog: &AsmProgram, initial: &MachineState, fuel: u64) -> Result<MachineState, InterpError> {
    let layout = Layout::new(prog, CODE_BASE);
    let image = layout.image(prog).map_err(InterpError::Image)?;
    let mut s = initial.clone();
    if fuel == 0 {
        return Ok(s);
    }
    s.regs[Reg::PC.index()] = prog.entry.as_deref().and_then(|e| layout.label(e)).unwrap_or(CODE_BASE);
    let mut m = Machine { prog, layout, image, s, at: 0 };
    while !m.s.halted && m.s.steps < fuel {
        let pc = m.s.regs[Reg::PC.index()];
        m.at = pc;
        let stuck = |reason: String| InterpError::Stuck { pc, reason };
        let idx = m.layout.instr_at(prog, pc).ok_or_else(|| stuck("no instruction at this address".into()))?;
        let AsmItem::Instr(ins) = &prog.items[idx].kind else { unreachable!() };
        let next = m.exec(ins).map_err(stuck)?;
        m.s.steps += 1;
        m.s.regs[Reg::PC.index()] = match next {
            Some(t) => t,
            None if m.s.halted => pc,
            None => pc.wrapping_add(ins.width as u32),
        };
    }
    Ok(m.s)
}
