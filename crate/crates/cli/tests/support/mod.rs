//! Shared helpers for the integration tests: a seeded generator of
//! compiler-shaped assembly programs and the differential oracle that
//! compares original and rewritten runs.

#![allow(dead_code)]

use std::fmt::Write as _;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::Rng;

use xomkit::rewriter::{interpret, parse, AsmProgram, Layout, MachineState, CODE_BASE, DATA_BASE};

pub struct Generated {
    pub text: String,
    /// Register holding the dispatch index.
    pub index_reg: usize,
    pub entries: usize,
    pub halfword: bool,
}

struct Gen<'a> {
    rng: &'a mut StdRng,
    out: String,
    work: Vec<usize>,
    constants: Vec<u32>,
    pool_words: Vec<(String, u32)>,
    id: usize,
}

impl Gen<'_> {
    fn line(&mut self, s: &str) {
        self.out.push('\t');
        self.out.push_str(s);
        self.out.push('\n');
    }

    fn label(&mut self, s: &str) {
        let _ = writeln!(self.out, "{s}:");
    }

    fn reg(&mut self) -> usize {
        *self.work.choose(self.rng).expect("work registers")
    }

    fn constant(&mut self) -> u32 {
        if !self.constants.is_empty() && self.rng.gen_bool(0.2) {
            return *self.constants.choose(self.rng).unwrap();
        }
        let c = match self.rng.gen_range(0..10) {
            0..=2 => self.rng.gen_range(0..0x1_0000),
            3 => self.rng.gen_range(0..0x100),
            4 => u32::MAX - self.rng.gen_range(0..0x100),
            5 => self.rng.gen_range(0x1_0000..0x100_0000),
            _ => self.rng.gen(),
        };
        self.constants.push(c);
        c
    }

    fn load(&mut self) {
        let rd = self.reg();
        if self.rng.gen_bool(0.3) {
            let (name, _) = match self.pool_words.len() {
                n if n > 0 && self.rng.gen_bool(0.4) => self.pool_words.choose(self.rng).unwrap().clone(),
                n => {
                    let c = self.constant();
                    let w = (format!(".LCPI{}_{n}", self.id), c);
                    self.pool_words.push(w.clone());
                    w
                }
            };
            self.line(&format!("ldr r{rd}, {name}"));
        } else {
            let c = self.constant();
            let text = match self.rng.gen_range(0..8) {
                0 => format!("ldr r{rd}, ={:#x}+{}", c.saturating_sub(16), c - c.saturating_sub(16)),
                1 => format!("ldr r{rd}, ={c}"),
                _ => format!("ldr r{rd}, ={c:#010x}"),
            };
            self.line(&text);
        }
    }

    fn op(&mut self) {
        let (d, n, m) = (self.reg(), self.reg(), self.reg());
        let text = match self.rng.gen_range(0..9) {
            0 => format!("movs r{d}, #{}", self.rng.gen_range(0..256)),
            1 => format!("adds r{d}, r{n}, r{m}"),
            2 => format!("eor r{d}, r{n}, r{m}"),
            3 => format!("lsl r{d}, r{n}, #{}", self.rng.gen_range(0..32)),
            4 => format!("mul r{d}, r{n}, r{m}"),
            5 => format!("subs r{d}, r{n}, #{}", self.rng.gen_range(0..256)),
            6 => format!("orr r{d}, r{n}, #{}", self.rng.gen_range(0..256)),
            7 => format!("add r{d}, r{n}, r{m}, lsl #{}", self.rng.gen_range(0..4)),
            _ => {
                self.load();
                return;
            }
        };
        self.line(&text);
    }
}

/// One program: straight-line prologue with constant loads, a bounds-checked
/// `tbb`/`tbh` dispatch over 2-32 entries, case bodies, a common exit that
/// stores results to data memory, and trailing literal pools.
pub fn program(rng: &mut StdRng, id: usize) -> Generated {
    let entries = rng.gen_range(2..=32);
    let halfword = rng.gen_bool(0.35);
    let index_reg = rng.gen_range(0..8);
    let text = render(rng, id, entries, halfword, index_reg);
    // Byte offsets can overflow for long case bodies; fall back to halfwords.
    let prog = parse(&text).expect("generated program parses");
    if !halfword && Layout::new(&prog, CODE_BASE).image(&prog).is_err() {
        return Generated { text: render(rng, id, entries, true, index_reg), index_reg, entries, halfword: true };
    }
    Generated { text, index_reg, entries, halfword }
}

fn render(rng: &mut StdRng, id: usize, entries: usize, halfword: bool, index_reg: usize) -> String {
    let work: Vec<usize> = (0..13).filter(|&r| r != index_reg).collect();
    let mut g = Gen { rng, out: String::new(), work, constants: Vec::new(), pool_words: Vec::new(), id };
    g.out.push_str("\t.syntax unified\n\t.thumb\n");
    g.label(&format!("f{id}"));
    for _ in 0..g.rng.gen_range(1..6) {
        g.op();
    }
    for _ in 0..g.rng.gen_range(1..4) {
        g.load();
    }
    if g.rng.gen_bool(0.3) {
        g.line(&format!("b.w .Lskip{id}"));
        g.line(".ltorg");
        g.label(&format!(".Lskip{id}"));
    }

    let cases = g.rng.gen_range(1..=entries.min(8));
    g.line(&format!("cmp r{index_reg}, #{}", entries - 1));
    g.line(&format!("bhi .LBB{id}_default"));
    let jt = format!(".LJTI{id}_0");
    if halfword {
        g.line(&format!("tbh [pc, r{index_reg}, lsl #1]"));
    } else {
        g.line(&format!("tbb [pc, r{index_reg}]"));
    }
    g.label(&jt);
    let targets: Vec<usize> = (0..entries).map(|k| if k < cases { k } else { g.rng.gen_range(0..cases) }).collect();
    let directive = if halfword { ".hword" } else { ".byte" };
    for chunk in targets.chunks(4) {
        let values: Vec<String> = chunk.iter().map(|c| format!("(.LBB{id}_{c}-{jt})/2")).collect();
        g.line(&format!("{directive} {}", values.join(", ")));
    }
    g.line(".p2align 1");
    for c in 0..cases {
        g.label(&format!(".LBB{id}_{c}"));
        for _ in 0..g.rng.gen_range(0..3) {
            g.op();
        }
        g.line(&format!("b.w .LBB{id}_end"));
    }
    g.label(&format!(".LBB{id}_default"));
    let fallback = g.rng.gen_range(0..256);
    g.line(&format!("movs r0, #{fallback}"));
    g.label(&format!(".LBB{id}_end"));
    // The index register is dead after dispatch; reuse it as the store base.
    g.line(&format!("movw r{index_reg}, #{:#x}", DATA_BASE & 0xffff));
    g.line(&format!("movt r{index_reg}, #{:#x}", DATA_BASE >> 16));
    for (k, r) in [0, 3, 5].into_iter().enumerate() {
        if r != index_reg {
            g.line(&format!("str r{r}, [r{index_reg}, #{}]", 4 * k));
        }
    }
    g.line("halt");
    if !g.pool_words.is_empty() {
        g.line(".p2align 2");
        for (name, c) in g.pool_words.clone() {
            g.label(&name);
            g.line(&format!(".word {c:#010x}"));
        }
    }
    g.out
}

/// Registers, flags, data memory and halt status must agree; the index
/// register is consumed by dispatch and the pc differs by layout.
pub fn states_agree(a: &MachineState, b: &MachineState, index_reg: usize) -> bool {
    (0..15).filter(|&r| r != index_reg).all(|r| a.regs[r] == b.regs[r])
        && a.flags == b.flags
        && a.memory == b.memory
        && a.halted == b.halted
}

pub struct Differential {
    pub runs: usize,
    pub mismatches: Vec<String>,
    pub original_island_reads: usize,
    pub rewritten_island_reads: usize,
}

/// Runs both programs for every table index and `states` random initial
/// register files.
pub fn differential(
    rng: &mut StdRng,
    original: &AsmProgram,
    rewritten: &AsmProgram,
    gen: &Generated,
    states: usize,
) -> Differential {
    let mut d = Differential { runs: 0, mismatches: Vec::new(), original_island_reads: 0, rewritten_island_reads: 0 };
    for index in 0..gen.entries {
        for _ in 0..states {
            let mut init = MachineState::new();
            for r in 0..13 {
                init.regs[r] = rng.gen();
            }
            init.regs[gen.index_reg] = index as u32;
            let a = interpret(original, &init, 10_000);
            let b = interpret(rewritten, &init, 10_000);
            d.runs += 1;
            match (a, b) {
                (Ok(a), Ok(b)) => {
                    d.original_island_reads += a.island_reads.len();
                    d.rewritten_island_reads += b.island_reads.len();
                    if !a.halted || !states_agree(&a, &b, gen.index_reg) {
                        d.mismatches.push(format!("index {index}: states differ"));
                    }
                    if a.island_reads.is_empty() {
                        d.mismatches.push(format!("index {index}: original read no islands"));
                    }
                    if !b.island_reads.is_empty() {
                        d.mismatches.push(format!("index {index}: rewritten read {:?}", b.island_reads));
                    }
                }
                (a, b) => d.mismatches.push(format!("index {index}: {:?} / {:?}", a.err(), b.err())),
            }
        }
    }
    d
}
