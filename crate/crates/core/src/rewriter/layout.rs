//! Address assignment for an assembly program.

use std::collections::HashMap;

use super::{AsmItem, AsmProgram, Expr, Operand};

/// Byte addresses of every item, label values and literal-pool placement.
///
/// Items are laid out in order from `base`. An `ldr rd, =C` reserves a word
/// in the next pool (`.ltorg` or the end of the program); equal expressions
/// waiting for the same pool share one slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub base: u32,
    /// Start address of each item; for pools this is before alignment padding.
    pub addrs: Vec<u32>,
    /// Bytes each item occupies, including padding and pool slots.
    pub sizes: Vec<u32>,
    pub labels: HashMap<String, u32>,
    /// Slot address for each `ldr rd, =C`, keyed by item index.
    pub literal_slots: HashMap<usize, u32>,
    /// `(slot address, value)` for every pool slot.
    pub pool: Vec<(u32, Expr)>,
    /// Total size in bytes, including the trailing pool.
    pub size: u32,
}

fn align_up(addr: u32, pow: u8) -> u32 {
    let a = 1u32 << pow;
    addr.wrapping_add(a - 1) & !(a - 1)
}

impl Layout {
    pub fn new(prog: &AsmProgram, base: u32) -> Layout {
        let mut layout = Layout {
            base,
            addrs: Vec::with_capacity(prog.items.len()),
            sizes: Vec::with_capacity(prog.items.len()),
            labels: HashMap::new(),
            literal_slots: HashMap::new(),
            pool: Vec::new(),
            size: 0,
        };
        let mut pending: Vec<(Expr, Vec<usize>)> = Vec::new();
        let mut pc = base;
        for (idx, item) in prog.items.iter().enumerate() {
            layout.addrs.push(pc);
            let size = match &item.kind {
                AsmItem::Label(l) => {
                    layout.labels.insert(l.clone(), pc);
                    0
                }
                AsmItem::Instr(ins) => {
                    if let (true, Some(Operand::Literal(e))) = (ins.base() == "ldr", ins.operands.get(1)) {
                        match pending.iter_mut().find(|(p, _)| p == e) {
                            Some((_, users)) => users.push(idx),
                            None => pending.push((e.clone(), vec![idx])),
                        }
                    }
                    ins.width as u32
                }
                AsmItem::Data { kind, values } => kind.size() * values.len() as u32,
                AsmItem::Align(n) => align_up(pc, *n) - pc,
                AsmItem::LiteralPool => layout.flush(&mut pending, pc) - pc,
                AsmItem::Directive(_) | AsmItem::Comment(_) => 0,
            };
            layout.sizes.push(size);
            pc = pc.wrapping_add(size);
        }
        pc = layout.flush(&mut pending, pc);
        layout.size = pc.wrapping_sub(base);
        layout
    }

    fn flush(&mut self, pending: &mut Vec<(Expr, Vec<usize>)>, pc: u32) -> u32 {
        if pending.is_empty() {
            return pc;
        }
        let mut slot = align_up(pc, 2);
        for (expr, users) in pending.drain(..) {
            for u in users {
                self.literal_slots.insert(u, slot);
            }
            self.pool.push((slot, expr));
            slot += 4;
        }
        slot
    }

    pub fn end(&self) -> u32 {
        self.base.wrapping_add(self.size)
    }

    pub fn label(&self, name: &str) -> Option<u32> {
        self.labels.get(name).copied()
    }

    pub fn eval(&self, expr: &Expr) -> Result<i64, String> {
        expr.eval(&|s| self.label(s).map(i64::from))
    }

    /// Item index of the instruction starting at `addr`.
    pub fn instr_at(&self, prog: &AsmProgram, addr: u32) -> Option<usize> {
        let start = self.addrs.partition_point(|&a| a < addr);
        (start..self.addrs.len())
            .take_while(|&i| self.addrs[i] == addr)
            .find(|&i| matches!(prog.items[i].kind, AsmItem::Instr(_)))
    }

    /// Byte image of the program. Instruction bytes and padding are zero;
    /// data and pool slots hold their values.
    pub fn image(&self, prog: &AsmProgram) -> Result<Vec<u8>, String> {
        let mut img = vec![0u8; self.size as usize];
        let mut put = |addr: u32, bytes: &[u8]| {
            let off = addr.wrapping_sub(self.base) as usize;
            img[off..off + bytes.len()].copy_from_slice(bytes);
        };
        for (idx, item) in prog.items.iter().enumerate() {
            if let AsmItem::Data { kind, values } = &item.kind {
                let size = kind.size();
                for (k, v) in values.iter().enumerate() {
                    let value = self.eval(v)?;
                    let bits = size * 8;
                    let (lo, hi) = (-(1i64 << (bits - 1)), 1i64 << bits);
                    if value < lo || value >= hi {
                        return Err(format!("value {value} does not fit in {}", kind.directive()));
                    }
                    let bytes = (value as u32).to_le_bytes();
                    put(self.addrs[idx] + k as u32 * size, &bytes[..size as usize]);
                }
            }
        }
        for (slot, expr) in &self.pool {
            let value = self.eval(expr)?;
            put(*slot, &(value as u32).to_le_bytes());
        }
        Ok(img)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rewriter::parse;

    #[test]
    fn addresses_and_pool() {
        let p = parse("main:\n\tldr r0, =0x12345678\n\tmovs.n r1, #1\n\tldr r2, =0x12345678\n\tldr r3, =7\n\thalt\n")
            .unwrap();
        let l = Layout::new(&p, 0x0800_0000);
        assert_eq!(l.addrs[1], 0x0800_0000);
        assert_eq!(l.addrs[2], 0x0800_0004);
        assert_eq!(l.addrs[5], 0x0800_000e);
        // Pool after halt at 0x10, word aligned.
        assert_eq!(l.literal_slots[&1], 0x0800_0010);
        assert_eq!(l.literal_slots[&3], 0x0800_0010);
        assert_eq!(l.literal_slots[&4], 0x0800_0014);
        assert_eq!(l.size, 0x18);
        let img = l.image(&p).unwrap();
        assert_eq!(&img[0x10..0x14], &0x1234_5678u32.to_le_bytes());
    }

    #[test]
    fn ltorg_places_pending_slots() {
        let p = parse("a:\n\tldr r0, =1\n\tb.n b\n\t.ltorg\nb:\n\thalt\n").unwrap();
        let l = Layout::new(&p, 0x0800_0000);
        assert_eq!(l.sizes[3], 6);
        assert_eq!(l.literal_slots[&1], 0x0800_0008);
        assert_eq!(l.label("b"), Some(0x0800_000c));
    }

    #[test]
    fn table_bytes() {
        let p = parse("\ttbb [pc, r0]\n.Lt:\n\t.byte (.L1-.Lt)/2, (.L2-.Lt)/2\n.L1:\n\tnop\n.L2:\n\thalt\n").unwrap();
        let l = Layout::new(&p, 0x0800_0000);
        assert_eq!(l.image(&p).unwrap()[4..6], [1, 2]);
        let bad = parse("\t.byte 300\n").unwrap();
        assert!(Layout::new(&bad, 0).image(&bad).is_err());
    }
}
