//! Line-oriented parser for the assembly subset.
//!
//! One item per line: `name:` labels, instructions, `.word`/`.hword`/`.byte`
//! data, `.ltorg`/`.pool`, `.p2align`/`.align`, and a fixed set of zero-size
//! directives. `@` starts a comment.

use std::collections::HashSet;

use super::{AsmItem, AsmProgram, DataKind, Expr, Instr, Item, MemOffset, Operand, ParseError, Reg, ShiftKind, Source};

const CONDITIONS: [&str; 17] =
    ["eq", "ne", "cs", "hs", "cc", "lo", "mi", "pl", "vs", "vc", "hi", "ls", "ge", "lt", "gt", "le", "al"];

const ZERO_SIZE_DIRECTIVES: [&str; 22] = [
    ".syntax",
    ".thumb",
    ".thumb_func",
    ".code",
    ".text",
    ".section",
    ".globl",
    ".global",
    ".type",
    ".size",
    ".arch",
    ".cpu",
    ".fpu",
    ".file",
    ".ident",
    ".eabi_attribute",
    ".fnstart",
    ".fnend",
    ".cantunwind",
    ".weak",
    ".hidden",
    ".local",
];

pub(crate) fn split_qualifier(mnemonic: &str) -> (&str, Option<&str>) {
    match mnemonic.rsplit_once('.') {
        Some((base, q @ ("w" | "n"))) => (base, Some(q)),
        _ => (mnemonic, None),
    }
}

pub(crate) fn condition(base: &str) -> Option<&str> {
    let cc = base.strip_prefix('b')?;
    CONDITIONS.contains(&cc).then_some(cc)
}

/// Encoded size of `mnemonic` in bytes. An explicit `.w`/`.n` qualifier wins;
/// otherwise the subset's width table applies.
pub fn encoding_width(mnemonic: &str) -> Option<u8> {
    let (base, q) = split_qualifier(mnemonic);
    match q {
        Some("w") => return Some(4),
        Some("n") => return Some(2),
        _ => {}
    }
    match base {
        "movw" | "movt" | "ldr" | "ldrb" | "ldrh" | "str" | "strb" | "strh" | "tbb" | "tbh" | "adr" | "add"
        | "adds" | "sub" | "subs" | "orr" | "orrs" | "and" | "ands" | "eor" | "eors" | "lsl" | "lsls" | "lsr"
        | "lsrs" | "asr" | "asrs" | "mov" | "movs" | "mvn" | "mvns" | "cmp" | "mul" | "muls" | "bl" => Some(4),
        "b" | "bx" | "blx" | "halt" | "nop" | "bkpt" | "cbz" | "cbnz" => Some(2),
        b if condition(b).is_some() => Some(2),
        _ => None,
    }
}

/// Mnemonics the interpreter gives meaning to; their operands must parse.
pub(crate) fn is_modelled(base: &str) -> bool {
    matches!(
        base,
        "movw"
            | "movt"
            | "mov"
            | "movs"
            | "mvn"
            | "mvns"
            | "add"
            | "adds"
            | "sub"
            | "subs"
            | "orr"
            | "orrs"
            | "and"
            | "ands"
            | "eor"
            | "eors"
            | "lsl"
            | "lsls"
            | "lsr"
            | "lsrs"
            | "asr"
            | "asrs"
            | "mul"
            | "muls"
            | "cmp"
            | "b"
            | "bl"
            | "bx"
            | "adr"
            | "ldr"
            | "ldrb"
            | "ldrh"
            | "str"
            | "strb"
            | "strh"
            | "tbb"
            | "tbh"
            | "halt"
            | "nop"
            | "push"
            | "pop"
    ) || condition(base).is_some()
}

fn push_pop_width(base: &str, operands: &str) -> Option<u8> {
    let list = parse_reglist(operands.trim())?;
    let extra = if base == "push" { Reg::LR } else { Reg::PC };
    Some(if list.iter().all(|r| r.index() < 8 || *r == extra) { 2 } else { 4 })
}

fn parse_reglist(text: &str) -> Option<Vec<Reg>> {
    let inner = text.strip_prefix('{')?.strip_suffix('}')?;
    let mut regs = Vec::new();
    for part in inner.split(',') {
        let part = part.trim();
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (Reg::parse(a.trim())?, Reg::parse(b.trim())?);
                for n in a.index()..=b.index() {
                    regs.push(Reg::new(n as u8)?);
                }
            }
            None => regs.push(Reg::parse(part)?),
        }
    }
    regs.sort();
    regs.dedup();
    Some(regs)
}

fn is_symbol(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.' || c == '$')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '$')
}

/// Splits on commas outside brackets and braces.
fn split_top(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let (mut depth, mut start) = (0i32, 0);
    for (i, c) in text.char_indices() {
        match c {
            '[' | '{' | '(' => depth += 1,
            ']' | '}' | ')' => depth -= 1,
            ',' if depth == 0 => {
                out.push(text[start..i].trim());
                start = i + 1;
            }
            _ => {}
        }
    }
    let last = text[start..].trim();
    if !last.is_empty() || !out.is_empty() {
        out.push(last);
    }
    out
}

struct ExprParser<'a> {
    s: &'a [u8],
    pos: usize,
}

impl ExprParser<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.s.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<Expr, String> {
        let mut lhs = self.term()?;
        while let Some(op @ (b'+' | b'-')) = self.peek() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = if op == b'+' { Expr::Add(lhs.into(), rhs.into()) } else { Expr::Sub(lhs.into(), rhs.into()) };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, String> {
        let mut lhs = self.atom()?;
        while let Some(op @ (b'*' | b'/')) = self.peek() {
            self.pos += 1;
            let rhs = self.atom()?;
            lhs = if op == b'*' { Expr::Mul(lhs.into(), rhs.into()) } else { Expr::Div(lhs.into(), rhs.into()) };
        }
        Ok(lhs)
    }

    fn atom(&mut self) -> Result<Expr, String> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if self.peek() != Some(b')') {
                    return Err("missing `)`".into());
                }
                self.pos += 1;
                Ok(e)
            }
            Some(b'-') => {
                self.pos += 1;
                Ok(match self.atom()? {
                    Expr::Num(n) => Expr::Num(-n),
                    e => Expr::Sub(Expr::Num(0).into(), e.into()),
                })
            }
            Some(c) if c.is_ascii_digit() => {
                let start = self.pos;
                while self.pos < self.s.len() && (self.s[self.pos].is_ascii_alphanumeric() || self.s[self.pos] == b'_')
                {
                    self.pos += 1;
                }
                let tok = std::str::from_utf8(&self.s[start..self.pos]).unwrap_or_default();
                parse_int(tok).map(Expr::Num).ok_or_else(|| format!("bad number `{tok}`"))
            }
            Some(_) => {
                let start = self.pos;
                while self.pos < self.s.len()
                    && (self.s[self.pos].is_ascii_alphanumeric() || matches!(self.s[self.pos], b'_' | b'.' | b'$'))
                {
                    self.pos += 1;
                }
                let tok = std::str::from_utf8(&self.s[start..self.pos]).unwrap_or_default();
                if tok.is_empty() || !is_symbol(tok) {
                    return Err(format!("unexpected `{}`", String::from_utf8_lossy(&self.s[start..])));
                }
                Ok(Expr::Sym(tok.to_string()))
            }
            None => Err("expected an expression".into()),
        }
    }
}

fn parse_int(tok: &str) -> Option<i64> {
    let t = tok.replace('_', "");
    let t = t.to_ascii_lowercase();
    if let Some(h) = t.strip_prefix("0x") {
        i64::from_str_radix(h, 16).ok()
    } else if let Some(b) = t.strip_prefix("0b") {
        i64::from_str_radix(b, 2).ok()
    } else {
        t.parse().ok()
    }
}

pub(crate) fn parse_expr(text: &str) -> Result<Expr, String> {
    let mut p = ExprParser { s: text.as_bytes(), pos: 0 };
    let e = p.expr()?;
    if p.peek().is_some() {
        return Err(format!("trailing text in `{text}`"));
    }
    Ok(e)
}

fn parse_imm(text: &str) -> Result<i64, String> {
    let body = text.strip_prefix('#').ok_or_else(|| format!("expected immediate, found `{text}`"))?;
    match parse_expr(body)? {
        Expr::Num(n) => Ok(n),
        e => e.eval(&|_| None),
    }
}

fn parse_shift(text: &str) -> Option<(ShiftKind, u8)> {
    let (kind, amount) = text.split_once(char::is_whitespace)?;
    let kind = match kind.to_ascii_lowercase().as_str() {
        "lsl" => ShiftKind::Lsl,
        "lsr" => ShiftKind::Lsr,
        "asr" => ShiftKind::Asr,
        _ => return None,
    };
    let amount = parse_imm(amount.trim()).ok()?;
    (0..32).contains(&amount).then_some((kind, amount as u8))
}

fn parse_mem(text: &str) -> Result<Operand, String> {
    let inner = text
        .strip_prefix('[')
        .and_then(|t| t.strip_suffix(']'))
        .ok_or_else(|| format!("unsupported memory operand `{text}`"))?;
    let parts = split_top(inner);
    let base = parts.first().and_then(|b| Reg::parse(b)).ok_or_else(|| format!("bad base register in `{text}`"))?;
    let offset = match parts.get(1..).unwrap_or(&[]) {
        [] => MemOffset::None,
        [imm] if imm.starts_with('#') => MemOffset::Imm(parse_imm(imm)?),
        [reg] => MemOffset::Reg { index: Reg::parse(reg).ok_or_else(|| format!("bad index `{reg}`"))?, shift: 0 },
        [reg, shift] => {
            let index = Reg::parse(reg).ok_or_else(|| format!("bad index `{reg}`"))?;
            match parse_shift(shift) {
                Some((ShiftKind::Lsl, amount)) if amount <= 3 => MemOffset::Reg { index, shift: amount },
                _ => return Err(format!("unsupported index shift `{shift}`")),
            }
        }
        _ => return Err(format!("unsupported memory operand `{text}`")),
    };
    Ok(Operand::Mem { base, offset })
}

fn parse_operand(text: &str) -> Result<Operand, String> {
    if text.starts_with('#') {
        return parse_imm(text).map(Operand::Imm);
    }
    if let Some(rest) = text.strip_prefix('=') {
        return parse_expr(rest).map(Operand::Literal);
    }
    if text.starts_with('[') {
        return parse_mem(text);
    }
    if let Some((kind, amount)) = parse_shift(text) {
        return Ok(Operand::Shift { kind, amount });
    }
    if let Some(r) = Reg::parse(text) {
        return Ok(Operand::Reg(r));
    }
    if is_symbol(text) {
        return Ok(Operand::Label(text.to_string()));
    }
    Err(format!("cannot parse operand `{text}`"))
}

fn parse_instr(mnemonic: &str, rest: &str) -> Result<Instr, String> {
    let (base, q) = split_qualifier(mnemonic);
    let width = match (base, q) {
        ("push" | "pop", None) => push_pop_width(base, rest),
        _ => encoding_width(mnemonic),
    }
    .ok_or_else(|| format!("unknown instruction width for `{mnemonic}`"))?;

    let pieces = split_top(rest);
    let operands = if matches!(base, "push" | "pop") {
        let regs = parse_reglist(rest.trim()).ok_or_else(|| format!("bad register list `{}`", rest.trim()))?;
        vec![Operand::Raw(format!("{{{}}}", regs.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(", ")))]
    } else if is_modelled(base) {
        pieces.iter().map(|p| parse_operand(p)).collect::<Result<Vec<_>, _>>()?
    } else {
        pieces.iter().map(|p| parse_operand(p).unwrap_or_else(|_| Operand::Raw(p.to_string()))).collect()
    };
    Ok(Instr { mnemonic: mnemonic.to_string(), operands, width })
}

/// Registers named by a `push`/`pop` operand.
pub(crate) fn reglist(op: &Operand) -> Option<Vec<Reg>> {
    match op {
        Operand::Raw(s) => parse_reglist(s),
        _ => None,
    }
}

fn parse_directive(content: &str) -> Result<AsmItem, String> {
    let (name, rest) = content.split_once(char::is_whitespace).unwrap_or((content, ""));
    let lname = name.to_ascii_lowercase();
    let data = |kind| -> Result<AsmItem, String> {
        let values = split_top(rest).into_iter().map(parse_expr).collect::<Result<Vec<_>, _>>()?;
        if values.is_empty() {
            return Err(format!("`{name}` needs at least one value"));
        }
        Ok(AsmItem::Data { kind, values })
    };
    match lname.as_str() {
        ".word" | ".long" | ".4byte" => data(DataKind::Word),
        ".hword" | ".short" | ".half" | ".2byte" => data(DataKind::Half),
        ".byte" => data(DataKind::Byte),
        ".ltorg" | ".pool" => Ok(AsmItem::LiteralPool),
        ".p2align" | ".align" | ".balign" => {
            let first = split_top(rest).into_iter().next().unwrap_or("");
            let n = parse_int(first).ok_or_else(|| format!("bad alignment `{first}`"))?;
            let pow = if lname == ".balign" {
                if n <= 0 || (n as u64).count_ones() != 1 {
                    return Err(format!("alignment {n} is not a power of two"));
                }
                (n as u64).trailing_zeros() as i64
            } else {
                n
            };
            if !(0..=12).contains(&pow) {
                return Err(format!("alignment 2^{pow} out of range"));
            }
            Ok(AsmItem::Align(pow as u8))
        }
        n if ZERO_SIZE_DIRECTIVES.contains(&n) || n.starts_with(".cfi_") => Ok(AsmItem::Directive(content.to_string())),
        _ => Err(format!("unknown directive `{name}`")),
    }
}

fn parse_line(content: &str) -> Result<AsmItem, String> {
    if let Some(label) = content.strip_suffix(':') {
        if is_symbol(label) {
            return Ok(AsmItem::Label(label.to_string()));
        }
        return Err(format!("bad label `{label}`"));
    }
    if content.contains(':') && content.split(':').next().map(is_symbol).unwrap_or(false) {
        return Err("one item per line: put the label on its own line".into());
    }
    if content.starts_with('.') {
        return parse_directive(content);
    }
    let (mnemonic, rest) = content.split_once(char::is_whitespace).unwrap_or((content, ""));
    parse_instr(&mnemonic.to_ascii_lowercase(), rest).map(AsmItem::Instr)
}

/// Parses assembly text into a program. Every label must be defined once and
/// every label an instruction names must exist; symbols inside data and `=`
/// literals may be external.
pub fn parse(text: &str) -> Result<AsmProgram, ParseError> {
    let mut items = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('@').next().unwrap_or("").trim();
        let kind = if content.is_empty() {
            AsmItem::Comment(raw.to_string())
        } else {
            parse_line(content).map_err(|reason| ParseError { line, reason })?
        };
        items.push(Item { kind, source: Some(Source { line, text: raw.to_string() }) });
    }

    let mut defined = HashSet::<String>::new();
    for item in &items {
        if let AsmItem::Label(l) = &item.kind {
            if !defined.insert(l.clone()) {
                return Err(ParseError {
                    line: item.line().unwrap_or(0),
                    reason: format!("label `{l}` defined twice"),
                });
            }
        }
    }
    for item in &mut items {
        if let AsmItem::Instr(ins) = &mut item.kind {
            // Opaque instructions may name registers or symbols the subset
            // does not know; those stay raw text.
            if !is_modelled(split_qualifier(&ins.mnemonic).0) {
                for op in &mut ins.operands {
                    if matches!(op, Operand::Label(l) if !defined.contains(l.as_str())) {
                        *op = Operand::Raw(op.to_string());
                    }
                }
            }
        }
    }
    for item in &items {
        if let AsmItem::Instr(ins) = &item.kind {
            for op in &ins.operands {
                if let Operand::Label(l) = op {
                    if !defined.contains(l.as_str()) {
                        return Err(ParseError {
                            line: item.line().unwrap_or(0),
                            reason: format!("undefined label `{l}`"),
                        });
                    }
                }
            }
        }
    }
    Ok(AsmProgram::new(items))
}
