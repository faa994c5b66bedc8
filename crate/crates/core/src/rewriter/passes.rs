//! The two island-removal rewrites and the island census.

use std::collections::HashSet;

use super::interp::CODE_BASE;
use super::layout::Layout;
use super::{AsmItem, AsmProgram, DataKind, Expr, Instr, Item, MemOffset, Operand, Reg, RewriteError};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RewriteReport {
    pub loads_rewritten: usize,
    pub tables_rewritten: usize,
    pub bytes_before: u64,
    pub bytes_after: u64,
    pub islands_remaining: usize,
}

fn literal_err(item: &Item, reason: impl Into<String>) -> RewriteError {
    RewriteError::UnsupportedLiteral { line: item.line(), reason: reason.into() }
}

fn table_err(item: &Item, reason: impl Into<String>) -> RewriteError {
    RewriteError::UnsupportedTable { line: item.line(), reason: reason.into() }
}

fn instr(mnemonic: &str, operands: Vec<Operand>) -> Item {
    Item::new(AsmItem::Instr(Instr::new(mnemonic, operands).expect("mnemonic in width table")))
}

/// Every symbol named anywhere in `items`, except in the items at `skip`.
fn referenced(items: &[Item], skip: &HashSet<usize>) -> HashSet<String> {
    let mut out = HashSet::new();
    for (i, item) in items.iter().enumerate() {
        if skip.contains(&i) {
            continue;
        }
        match &item.kind {
            AsmItem::Instr(ins) => {
                for op in &ins.operands {
                    match op {
                        Operand::Label(l) => {
                            out.insert(l.clone());
                        }
                        Operand::Literal(e) => out.extend(e.symbols().into_iter().map(String::from)),
                        _ => {}
                    }
                }
            }
            AsmItem::Data { values, .. } => {
                for v in values {
                    out.extend(v.symbols().into_iter().map(String::from));
                }
            }
            _ => {}
        }
    }
    out
}

fn constant_value(expr: &Expr) -> Result<u32, String> {
    if let Some(s) = expr.symbols().first() {
        return Err(format!("constant refers to symbol `{s}`, which needs relocation"));
    }
    let v = expr.eval(&|_| None)?;
    if !(-(1i64 << 31)..(1i64 << 32)).contains(&v) {
        return Err(format!("constant {v} does not fit in 32 bits"));
    }
    Ok(v as u32)
}

/// MOVW, plus MOVT when the high half is non-zero.
fn materialize(rd: Reg, value: u32) -> Vec<Item> {
    let mut out = vec![instr("movw", vec![Operand::Reg(rd), Operand::Imm((value & 0xffff) as i64)])];
    if value >> 16 != 0 {
        out.push(instr("movt", vec![Operand::Reg(rd), Operand::Imm((value >> 16) as i64)]));
    }
    out
}

/// Index of the `.word` item holding the word at `addr`, with the value
/// offset inside it.
fn word_at(prog: &AsmProgram, layout: &Layout, addr: u32) -> Option<(usize, usize)> {
    prog.items.iter().enumerate().find_map(|(i, item)| match &item.kind {
        AsmItem::Data { kind: DataKind::Word, values } => {
            let start = layout.addrs[i];
            let off = addr.checked_sub(start)?;
            (off % 4 == 0 && (off / 4) < values.len() as u32).then_some((i, (off / 4) as usize))
        }
        _ => None,
    })
}

fn load_constants(prog: &AsmProgram) -> Result<(AsmProgram, usize), RewriteError> {
    let layout = Layout::new(prog, CODE_BASE);
    let mut replaced: Vec<Option<Vec<Item>>> = vec![None; prog.items.len()];
    let mut pool_labels = HashSet::new();
    let mut count = 0;

    for (i, item) in prog.items.iter().enumerate() {
        let AsmItem::Instr(ins) = &item.kind else { continue };
        if !ins.is_literal_load() {
            continue;
        }
        let rd = match ins.operands.first() {
            Some(Operand::Reg(r)) if *r != Reg::PC && *r != Reg::SP => *r,
            _ => return Err(literal_err(item, "destination must be r0-r12 or lr")),
        };
        let value = match &ins.operands[1] {
            Operand::Literal(e) => constant_value(e).map_err(|r| literal_err(item, r))?,
            Operand::Label(l) => {
                let addr = layout.label(l).expect("parser checks labels");
                let (di, k) = word_at(prog, &layout, addr)
                    .ok_or_else(|| literal_err(item, format!("`{l}` does not label a .word")))?;
                let AsmItem::Data { values, .. } = &prog.items[di].kind else { unreachable!() };
                pool_labels.insert(l.clone());
                constant_value(&values[k]).map_err(|r| literal_err(item, r))?
            }
            _ => return Err(literal_err(item, "raw pc-relative offset")),
        };
        replaced[i] = Some(materialize(rd, value));
        count += 1;
    }

    // Pool words whose labels lost their last reference are deleted.
    let rewritten: HashSet<usize> = (0..prog.items.len()).filter(|&i| replaced[i].is_some()).collect();
    let still_used = referenced(&prog.items, &rewritten);
    let mut drop = HashSet::new();
    for (i, item) in prog.items.iter().enumerate() {
        let AsmItem::Label(l) = &item.kind else { continue };
        if !pool_labels.contains(l) || still_used.contains(l) {
            continue;
        }
        drop.insert(i);
        // The word itself goes when every label in front of it is gone and it
        // holds a single value.
        let mut j = i + 1;
        let mut other_label = false;
        while let Some(next) = prog.items.get(j) {
            match &next.kind {
                AsmItem::Label(m) => other_label |= !pool_labels.contains(m) || still_used.contains(m),
                AsmItem::Comment(_) | AsmItem::Directive(_) => {}
                _ => break,
            }
            j += 1;
        }
        if let Some(AsmItem::Data { kind: DataKind::Word, values }) = prog.items.get(j).map(|it| &it.kind) {
            if values.len() == 1 && !other_label {
                drop.insert(j);
            }
        }
    }
    // Alignment that only served a dropped pool word goes with it.
    for &i in drop.clone().iter() {
        if !matches!(prog.items[i].kind, AsmItem::Data { .. }) {
            continue;
        }
        let mut k = i;
        while k > 0 {
            k -= 1;
            match &prog.items[k].kind {
                AsmItem::Label(_) if drop.contains(&k) => {}
                AsmItem::Comment(_) => {}
                AsmItem::Align(_) => {
                    let next_kept = prog.items[i + 1..].iter().enumerate().find(|(off, it)| {
                        !drop.contains(&(i + 1 + off))
                            && !matches!(it.kind, AsmItem::Comment(_) | AsmItem::Directive(_))
                    });
                    if !matches!(next_kept.map(|(_, it)| &it.kind), Some(AsmItem::Data { .. })) {
                        drop.insert(k);
                    }
                    break;
                }
                _ => break,
            }
        }
    }

    let mut items = Vec::with_capacity(prog.items.len());
    for (i, item) in prog.items.iter().enumerate() {
        if drop.contains(&i) {
            continue;
        }
        match replaced[i].take() {
            Some(new) => items.extend(new),
            None => items.push(item.clone()),
        }
    }
    Ok((AsmProgram { items, entry: prog.entry.clone() }, count))
}

/// Replaces every literal-pool load with MOVW/MOVT and deletes pool words
/// that are no longer referenced.
pub fn remove_load_constants(prog: &AsmProgram) -> Result<AsmProgram, RewriteError> {
    load_constants(prog).map(|(p, _)| p)
}

fn fresh_label(taken: &mut HashSet<String>, counter: &mut usize) -> String {
    loop {
        let name = format!(".Lxom_tramp{counter}");
        *counter += 1;
        if taken.insert(name.clone()) {
            return name;
        }
    }
}

struct Table {
    /// Item indices making up the table: data plus labels inside it.
    span: Vec<usize>,
    index: Reg,
    targets: Vec<String>,
}

fn resolve_table(prog: &AsmProgram, layout: &Layout, at: usize) -> Result<Table, RewriteError> {
    let item = &prog.items[at];
    let AsmItem::Instr(ins) = &item.kind else { unreachable!() };
    let byte = ins.base() == "tbb";
    let (index, shift) = match ins.operands.as_slice() {
        [Operand::Mem { base, offset: MemOffset::Reg { index, shift } }] => {
            if *base != Reg::PC {
                return Err(table_err(item, format!("table base is {base}, not pc")));
            }
            (*index, *shift)
        }
        _ => return Err(table_err(item, "expected [pc, rI] operand")),
    };
    if shift != if byte { 0 } else { 1 } {
        return Err(table_err(item, format!("index shift {shift} does not match {}", ins.base())));
    }
    if index == Reg::PC || index == Reg::SP {
        return Err(table_err(item, format!("index register {index} is not usable")));
    }
    let want = if byte { DataKind::Byte } else { DataKind::Half };

    let mut span = Vec::new();
    let mut values = Vec::new();
    for (i, it) in prog.items.iter().enumerate().skip(at + 1) {
        match &it.kind {
            AsmItem::Data { kind, values: v } if *kind == want => values.extend(v.iter()),
            AsmItem::Data { .. } => return Err(table_err(it, "table entry width does not match the branch")),
            AsmItem::Label(_) | AsmItem::Comment(_) => {}
            _ => break,
        }
        span.push(i);
    }
    // Trailing labels belong to the following code, not the table.
    while let Some(&last) = span.last() {
        if matches!(prog.items[last].kind, AsmItem::Data { .. }) {
            break;
        }
        span.pop();
    }
    if values.is_empty() {
        return Err(table_err(item, "table has no entries"));
    }

    let base = layout.addrs[at] + 4;
    let limit = if byte { 0xff } else { 0xffff };
    let mut targets = Vec::with_capacity(values.len());
    for (k, v) in values.iter().enumerate() {
        let off = layout.eval(v).map_err(|e| table_err(item, format!("entry {k}: {e}")))?;
        if !(0..=limit).contains(&off) {
            return Err(table_err(item, format!("entry {k} offset {off} out of range")));
        }
        let target = base + 2 * off as u32;
        let named = v.signed_symbols().into_iter().find(|(s, pos)| *pos && layout.label(s) == Some(target));
        let name = match named {
            Some((s, _)) => s.to_string(),
            None => prog
                .items
                .iter()
                .enumerate()
                .find_map(|(i, it)| match &it.kind {
                    AsmItem::Label(l) if layout.addrs[i] == target => Some(l.clone()),
                    _ => None,
                })
                .ok_or_else(|| table_err(item, format!("entry {k} targets {target:#x}, which has no label")))?,
        };
        targets.push(name);
    }
    Ok(Table { span, index, targets })
}

fn dispatch(index: Reg, tramp: &str, targets: &[String]) -> Vec<Item> {
    let r = Operand::Reg(index);
    let mut out = vec![
        instr("lsl.w", vec![r.clone(), r.clone(), Operand::Imm(2)]),
        instr("orr.w", vec![r.clone(), r.clone(), Operand::Imm(1)]),
        // pc reads as this instruction's address plus 4, which is `tramp`.
        instr("add.n", vec![r.clone(), Operand::Reg(Reg::PC)]),
        instr("bx", vec![r]),
        Item::new(AsmItem::Label(tramp.to_string())),
    ];
    out.extend(targets.iter().map(|t| instr("b.w", vec![Operand::Label(t.clone())])));
    out
}

fn jump_tables(prog: &AsmProgram) -> Result<(AsmProgram, usize), RewriteError> {
    let layout = Layout::new(prog, CODE_BASE);
    let mut tables = Vec::new();
    for (i, item) in prog.items.iter().enumerate() {
        if matches!(&item.kind, AsmItem::Instr(ins) if ins.is_table_branch()) {
            tables.push((i, resolve_table(prog, &layout, i)?));
        }
    }
    if tables.is_empty() {
        return Ok((prog.clone(), 0));
    }

    let mut drop: HashSet<usize> = tables.iter().flat_map(|(_, t)| t.span.iter().copied()).collect();
    drop.extend(tables.iter().map(|(i, _)| *i));
    // Labels inside a table survive if something outside the tables names them.
    let used = referenced(&prog.items, &drop);
    let keep_labels: HashSet<usize> = drop
        .iter()
        .copied()
        .filter(|&i| {
            matches!(&prog.items[i].kind, AsmItem::Label(l) if used.contains(l) || prog.entry.as_deref() == Some(l))
        })
        .collect();

    let mut taken: HashSet<String> = prog.labels().map(String::from).collect();
    let mut counter = 0;
    let mut items = Vec::with_capacity(prog.items.len());
    let mut next_table = tables.iter().peekable();
    for (i, item) in prog.items.iter().enumerate() {
        if let Some((at, t)) = next_table.peek() {
            if *at == i {
                let tramp = fresh_label(&mut taken, &mut counter);
                items.extend(dispatch(t.index, &tramp, &t.targets));
                next_table.next();
                continue;
            }
        }
        if !drop.contains(&i) || keep_labels.contains(&i) {
            items.push(item.clone());
        }
    }
    Ok((AsmProgram { items, entry: prog.entry.clone() }, tables.len()))
}

/// Replaces each `tbb`/`tbh` and its inline table with a dispatch sequence
/// into a trampoline of `b.w` branches. The index register is consumed.
pub fn remove_jump_tables(prog: &AsmProgram) -> Result<AsmProgram, RewriteError> {
    jump_tables(prog).map(|(p, _)| p)
}

/// Counts data items and code-reading instructions left in the program.
pub fn verify_no_islands(prog: &AsmProgram) -> RewriteReport {
    let layout = Layout::new(prog, CODE_BASE);
    let islands = prog
        .items
        .iter()
        .filter(|it| match &it.kind {
            AsmItem::Data { .. } => true,
            AsmItem::Instr(ins) => ins.reads_code(),
            _ => false,
        })
        .count();
    RewriteReport {
        bytes_before: layout.size as u64,
        bytes_after: layout.size as u64,
        islands_remaining: islands,
        ..RewriteReport::default()
    }
}

/// Runs both rewrites and reports the result.
pub fn rewrite(prog: &AsmProgram) -> Result<(AsmProgram, RewriteReport), RewriteError> {
    let (tabled, tables) = jump_tables(prog)?;
    let (out, loads) = load_constants(&tabled)?;
    let census = verify_no_islands(&out);
    let report = RewriteReport {
        loads_rewritten: loads,
        tables_rewritten: tables,
        bytes_before: Layout::new(prog, CODE_BASE).size as u64,
        bytes_after: census.bytes_after,
        islands_remaining: census.islands_remaining,
    };
    Ok((out, report))
}
