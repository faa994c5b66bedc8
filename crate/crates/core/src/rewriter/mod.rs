//! Constant-island removal for a Thumb-2 assembly subset.
//!
//! Compilers embed two kinds of data in the instruction stream: literal-pool
//! words read by pc-relative `ldr`, and the offset tables that follow
//! `tbb`/`tbh`. Once code is execute-only those reads trap, so both are
//! rewritten into pure instruction sequences:
//!
//! * `ldr rd, =C` (or `ldr rd, .Lpool` with `.Lpool: .word C`) becomes
//!   `movw rd, #(C & 0xffff)` plus `movt rd, #(C >> 16)` when the high half is
//!   non-zero.
//! * `tbb [pc, ri]` / `tbh [pc, ri, lsl #1]` and their inline table become a
//!   short dispatch sequence into a trampoline of `b.w` instructions, one per
//!   table entry.
//!
//! A small interpreter over the same subset checks that rewritten programs
//! behave like the originals and never read their own code.

mod interp;
mod layout;
mod parse;
mod passes;

use std::fmt;

use thiserror::Error;

pub use interp::{
    entry_address, interpret, Flags, InterpError, IslandRead, MachineState, CODE_BASE, DATA_BASE, DATA_SIZE,
};
pub use layout::Layout;
pub use parse::parse;
pub use passes::{remove_jump_tables, remove_load_constants, rewrite, verify_no_islands, RewriteReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Reg(u8);

impl Reg {
    pub const SP: Reg = Reg(13);
    pub const LR: Reg = Reg(14);
    pub const PC: Reg = Reg(15);

    pub fn new(n: u8) -> Option<Reg> {
        (n < 16).then_some(Reg(n))
    }

    pub fn index(&self) -> usize {
        self.0 as usize
    }

    pub fn parse(text: &str) -> Option<Reg> {
        match text.to_ascii_lowercase().as_str() {
            "sp" => Some(Reg::SP),
            "lr" => Some(Reg::LR),
            "pc" => Some(Reg::PC),
            "ip" => Some(Reg(12)),
            "fp" => Some(Reg(11)),
            s => s.strip_prefix('r').and_then(|n| n.parse().ok()).and_then(Reg::new),
        }
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            13 => f.write_str("sp"),
            14 => f.write_str("lr"),
            15 => f.write_str("pc"),
            n => write!(f, "r{n}"),
        }
    }
}

/// Assembler expression: numbers, symbols, `+ - * /` and parentheses.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Expr {
    Num(i64),
    Sym(String),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn eval(&self, lookup: &dyn Fn(&str) -> Option<i64>) -> Result<i64, String> {
        Ok(match self {
            Expr::Num(n) => *n,
            Expr::Sym(s) => lookup(s).ok_or_else(|| format!("undefined symbol `{s}`"))?,
            Expr::Add(a, b) => a.eval(lookup)?.wrapping_add(b.eval(lookup)?),
            Expr::Sub(a, b) => a.eval(lookup)?.wrapping_sub(b.eval(lookup)?),
            Expr::Mul(a, b) => a.eval(lookup)?.wrapping_mul(b.eval(lookup)?),
            Expr::Div(a, b) => {
                let d = b.eval(lookup)?;
                if d == 0 {
                    return Err("division by zero".into());
                }
                a.eval(lookup)? / d
            }
        })
    }

    /// Every symbol mentioned, with `false` for symbols that are subtracted.
    pub fn signed_symbols(&self) -> Vec<(&str, bool)> {
        let mut out = Vec::new();
        self.collect(true, &mut out);
        out
    }

    pub fn symbols(&self) -> Vec<&str> {
        self.signed_symbols().into_iter().map(|(s, _)| s).collect()
    }

    fn collect<'a>(&'a self, positive: bool, out: &mut Vec<(&'a str, bool)>) {
        match self {
            Expr::Num(_) => {}
            Expr::Sym(s) => out.push((s, positive)),
            Expr::Add(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.collect(positive, out);
                b.collect(positive, out);
            }
            Expr::Sub(a, b) => {
                a.collect(positive, out);
                b.collect(!positive, out);
            }
        }
    }

    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, parent: u8) -> fmt::Result {
        let (prec, op, a, b) = match self {
            Expr::Num(n) if *n > 9 => return write!(f, "{n:#x}"),
            Expr::Num(n) => return write!(f, "{n}"),
            Expr::Sym(s) => return f.write_str(s),
            Expr::Add(a, b) => (1, "+", a, b),
            Expr::Sub(a, b) => (1, "-", a, b),
            Expr::Mul(a, b) => (2, "*", a, b),
            Expr::Div(a, b) => (2, "/", a, b),
        };
        if prec < parent {
            f.write_str("(")?;
        }
        a.fmt_prec(f, prec)?;
        f.write_str(op)?;
        b.fmt_prec(f, prec + 1)?;
        if prec < parent {
            f.write_str(")")?;
        }
        Ok(())
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShiftKind {
    Lsl,
    Lsr,
    Asr,
}

impl fmt::Display for ShiftKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShiftKind::Lsl => "lsl",
            ShiftKind::Lsr => "lsr",
            ShiftKind::Asr => "asr",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum MemOffset {
    None,
    Imm(i64),
    Reg { index: Reg, shift: u8 },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Operand {
    Reg(Reg),
    Imm(i64),
    /// Bare symbol: branch target, `adr` target or pc-relative `ldr` source.
    Label(String),
    /// `=expr` literal-pool pseudo operand.
    Literal(Expr),
    Mem {
        base: Reg,
        offset: MemOffset,
    },
    Shift {
        kind: ShiftKind,
        amount: u8,
    },
    /// Operand text of an instruction whose semantics are not modelled.
    Raw(String),
}

fn fmt_imm(f: &mut fmt::Formatter<'_>, v: i64) -> fmt::Result {
    if (0..10).contains(&v) {
        write!(f, "#{v}")
    } else if v < 0 {
        write!(f, "#-{:#x}", -v)
    } else {
        write!(f, "#{v:#x}")
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Reg(r) => write!(f, "{r}"),
            Operand::Imm(v) => fmt_imm(f, *v),
            Operand::Label(l) => f.write_str(l),
            Operand::Literal(e) => write!(f, "={e}"),
            Operand::Mem { base, offset } => {
                write!(f, "[{base}")?;
                match offset {
                    MemOffset::None => {}
                    MemOffset::Imm(v) => {
                        f.write_str(", ")?;
                        fmt_imm(f, *v)?;
                    }
                    MemOffset::Reg { index, shift: 0 } => write!(f, ", {index}")?,
                    MemOffset::Reg { index, shift } => write!(f, ", {index}, lsl #{shift}")?,
                }
                f.write_str("]")
            }
            Operand::Shift { kind, amount } => write!(f, "{kind} #{amount}"),
            Operand::Raw(s) => f.write_str(s),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Instr {
    /// Lower-case mnemonic as written, including any `.w`/`.n` qualifier.
    pub mnemonic: String,
    pub operands: Vec<Operand>,
    /// Encoded size in bytes, 2 or 4.
    pub width: u8,
}

impl Instr {
    pub fn new(mnemonic: &str, operands: Vec<Operand>) -> Result<Instr, String> {
        let width = parse::encoding_width(mnemonic).ok_or_else(|| format!("unknown width for `{mnemonic}`"))?;
        Ok(Instr { mnemonic: mnemonic.to_string(), operands, width })
    }

    /// Mnemonic without the `.w`/`.n` qualifier.
    pub fn base(&self) -> &str {
        self.mnemonic.strip_suffix(".w").or_else(|| self.mnemonic.strip_suffix(".n")).unwrap_or(&self.mnemonic)
    }

    /// A pc-relative `ldr` from the literal pool, in either form.
    pub fn is_literal_load(&self) -> bool {
        self.base() == "ldr"
            && matches!(
                self.operands.get(1),
                Some(Operand::Literal(_)) | Some(Operand::Label(_)) | Some(Operand::Mem { base: Reg::PC, .. })
            )
    }

    pub fn is_table_branch(&self) -> bool {
        matches!(self.base(), "tbb" | "tbh")
    }

    /// Any instruction that reads data from the instruction stream.
    pub fn reads_code(&self) -> bool {
        self.is_literal_load()
            || self.is_table_branch()
            || (matches!(self.base(), "ldr" | "ldrb" | "ldrh")
                && matches!(self.operands.get(1), Some(Operand::Mem { base: Reg::PC, .. })))
    }
}

impl fmt::Display for Instr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.mnemonic)?;
        for (i, op) in self.operands.iter().enumerate() {
            f.write_str(if i == 0 { "\t" } else { ", " })?;
            write!(f, "{op}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DataKind {
    Word,
    Half,
    Byte,
}

impl DataKind {
    pub fn size(&self) -> u32 {
        match self {
            DataKind::Word => 4,
            DataKind::Half => 2,
            DataKind::Byte => 1,
        }
    }

    pub fn directive(&self) -> &'static str {
        match self {
            DataKind::Word => ".word",
            DataKind::Half => ".hword",
            DataKind::Byte => ".byte",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum AsmItem {
    Label(String),
    Instr(Instr),
    Data {
        kind: DataKind,
        values: Vec<Expr>,
    },
    /// `.ltorg` / `.pool`: pending `ldr =C` constants are placed here.
    LiteralPool,
    /// `.p2align n` / `.align n`: pad to a `2^n` boundary.
    Align(u8),
    /// Zero-size directive kept verbatim (`.syntax`, `.thumb_func`, ...).
    Directive(String),
    /// Blank or comment-only line.
    Comment(String),
}

impl fmt::Display for AsmItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AsmItem::Label(l) => write!(f, "{l}:"),
            AsmItem::Instr(i) => write!(f, "\t{i}"),
            AsmItem::Data { kind, values } => {
                write!(f, "\t{}\t", kind.directive())?;
                for (i, v) in values.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{v}")?;
                }
                Ok(())
            }
            AsmItem::LiteralPool => f.write_str("\t.ltorg"),
            AsmItem::Align(n) => write!(f, "\t.p2align\t{n}"),
            AsmItem::Directive(d) => write!(f, "\t{d}"),
            AsmItem::Comment(c) => f.write_str(c),
        }
    }
}

/// Where an item came from in the input text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Source {
    pub line: usize,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Item {
    pub kind: AsmItem,
    pub source: Option<Source>,
}

impl Item {
    pub fn new(kind: AsmItem) -> Self {
        Item { kind, source: None }
    }

    pub fn line(&self) -> Option<usize> {
        self.source.as_ref().map(|s| s.line)
    }
}

impl From<AsmItem> for Item {
    fn from(kind: AsmItem) -> Self {
        Item::new(kind)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AsmProgram {
    pub items: Vec<Item>,
    /// First label in the program, where execution starts.
    pub entry: Option<String>,
}

impl AsmProgram {
    pub fn new(items: Vec<Item>) -> Self {
        let entry = items.iter().find_map(|i| match &i.kind {
            AsmItem::Label(l) => Some(l.clone()),
            _ => None,
        });
        AsmProgram { items, entry }
    }

    /// Text form: unchanged items keep their original line, new ones are
    /// printed canonically.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for item in &self.items {
            match &item.source {
                Some(s) => out.push_str(&s.text),
                None => out.push_str(&item.kind.to_string()),
            }
            out.push('\n');
        }
        out
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.items.iter().filter_map(|i| match &i.kind {
            AsmItem::Label(l) => Some(l.as_str()),
            _ => None,
        })
    }

    pub fn instructions(&self) -> impl Iterator<Item = &Instr> {
        self.items.iter().filter_map(|i| match &i.kind {
            AsmItem::Instr(ins) => Some(ins),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {reason}")]
pub struct ParseError {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RewriteError {
    #[error("{}unsupported literal: {reason}", at(*line))]
    UnsupportedLiteral { line: Option<usize>, reason: String },
    #[error("{}unsupported table: {reason}", at(*line))]
    UnsupportedTable { line: Option<usize>, reason: String },
}

fn at(line: Option<usize>) -> String {
    line.map(|l| format!("line {l}: ")).unwrap_or_default()
}
