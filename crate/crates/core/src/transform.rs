//! Rewriting of bitsliced programs into dual-rail precharge form.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::Serialize;
use thiserror::Error;

use crate::asm::{
    BinaryOp, Directive, Encoding, IndBase, Instruction, Line, Loc, Operand, Program,
    Target, UnaryOp, Word,
};

/// Encoding layout and register/memory resources of the DPL macros.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct DplConfig {
    pub bit_f: u32,
    pub bit_t: u32,
    /// Least significant bit of the 4-bit LUT index field.
    pub pattern_lo: u32,
    pub lut_base: u32,
    /// Interleave tables on the free bits below `pattern_lo`.
    pub compact: bool,
    pub scratch: [u8; 3],
    pub zero_reg: u8,
    pub word_width: u32,
    /// Escalate taint warnings to errors.
    pub strict: bool,
}

impl Default for DplConfig {
    fn default() -> Self {
        DplConfig {
            bit_f: 1,
            bit_t: 0,
            pattern_lo: 0,
            lut_base: 0,
            compact: false,
            scratch: [20, 21, 22],
            zero_reg: 0,
            word_width: 8,
            strict: false,
        }
    }
}

/// Which operand is shifted to build the LUT index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftMode {
    /// The field starts at the lower rail; `a` moves up.
    LeftA,
    /// The field ends at the upper rail; `b` moves down.
    RightB,
}

/// Derived macro parameters of a valid configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Layout {
    pub mask: Word,
    pub shifts: u32,
    pub mode: ShiftMode,
    pub encoding: Encoding,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("bit_f and bit_t must differ")]
    SameRail,
    #[error("rail bit {0} outside the {1}-bit word")]
    RailOutOfWord(u32, u32),
    #[error("rails {0} and {1} do not fit four consecutive bits")]
    RailsTooFar(u32, u32),
    #[error("pattern offset {lo} does not frame rails {f},{t} in a 4-bit field inside the word; use {suggest:?}")]
    BadPattern {
        lo: u32,
        f: u32,
        t: u32,
        suggest: Option<u32>,
    },
    #[error("LUT base {base:#x} must have bits {lo}..{hi} clear")]
    Misaligned { base: u32, lo: u32, hi: u32 },
    #[error("scratch and zero registers must be pairwise distinct")]
    RegisterClash,
    #[error("word width {0} unsupported")]
    Width(u32),
}

impl DplConfig {
    /// Layout with bits 1 and 2 and interleaved tables.
    pub fn avr() -> DplConfig {
        DplConfig {
            bit_f: 2,
            bit_t: 1,
            pattern_lo: 1,
            compact: true,
            ..DplConfig::default()
        }
    }

    /// Same configuration with the pattern offset derived from the rails.
    pub fn with_rails(self, bit_f: u32, bit_t: u32) -> DplConfig {
        let mut c = DplConfig {
            bit_f,
            bit_t,
            ..self
        };
        if let Some(lo) = default_pattern_lo(bit_f, bit_t, self.word_width) {
            c.pattern_lo = lo;
        }
        c
    }

    pub fn encoding(&self) -> Encoding {
        Encoding {
            zero: 1 << self.bit_f,
            one: 1 << self.bit_t,
        }
    }

    pub fn encode(&self, bit: bool) -> Word {
        self.encoding().encode(bit)
    }

    pub fn rail_mask(&self) -> Word {
        (1 << self.bit_f) | (1 << self.bit_t)
    }

    pub fn validate(&self) -> Result<Layout, ConfigError> {
        let w = self.word_width;
        if !(4..=32).contains(&w) {
            return Err(ConfigError::Width(w));
        }
        let (f, t) = (self.bit_f, self.bit_t);
        if f == t {
            return Err(ConfigError::SameRail);
        }
        for b in [f, t] {
            if b >= w {
                return Err(ConfigError::RailOutOfWord(b, w));
            }
        }
        let (lo_rail, hi_rail) = (f.min(t), f.max(t));
        let gap = hi_rail - lo_rail;
        if gap > 2 {
            return Err(ConfigError::RailsTooFar(f, t));
        }
        let lo = self.pattern_lo;
        let shifts = 3 - gap;
        let mode = if lo == lo_rail && lo + 4 <= w {
            ShiftMode::LeftA
        } else if lo + 3 == hi_rail && lo < lo_rail {
            ShiftMode::RightB
        } else {
            return Err(ConfigError::BadPattern {
                lo,
                f,
                t,
                suggest: default_pattern_lo(f, t, w),
            });
        };
        let field = 0xF << lo;
        let low = if self.compact { (1 << lo) - 1 } else { 0 };
        if self.lut_base & (field | low) != 0 {
            return Err(ConfigError::Misaligned {
                base: self.lut_base,
                lo: if self.compact { 0 } else { lo },
                hi: lo + 3,
            });
        }
        let regs = [self.scratch[0], self.scratch[1], self.scratch[2], self.zero_reg];
        if regs.iter().collect::<BTreeSet<_>>().len() != 4 {
            return Err(ConfigError::RegisterClash);
        }
        Ok(Layout {
            mask: self.rail_mask(),
            shifts,
            mode,
            encoding: self.encoding(),
        })
    }

    fn pack(&self, layout: &Layout, a: Word, b: Word) -> Word {
        match layout.mode {
            ShiftMode::LeftA => (a << layout.shifts) | b,
            ShiftMode::RightB => a | (b >> layout.shifts),
        }
    }
}

/// Pattern offset for a rail pair: the lower rail if the field fits above
/// it, otherwise the field ending at the upper rail.
pub fn default_pattern_lo(bit_f: u32, bit_t: u32, width: u32) -> Option<u32> {
    let (lo, hi) = (bit_f.min(bit_t), bit_f.max(bit_t));
    if bit_f == bit_t || hi - lo > 2 || hi >= width {
        return None;
    }
    if lo + 4 <= width {
        Some(lo)
    } else {
        (hi + 1).checked_sub(4)
    }
}

/// Every admissible rail pair of a word width as `(bit_f, bit_t)` with the
/// upper bit as the False rail.
pub fn layouts(width: u32) -> Vec<(u32, u32)> {
    let mut v = Vec::new();
    for gap in 1..=2 {
        for lo in 0..width.saturating_sub(gap) {
            if default_pattern_lo(lo + gap, lo, width).is_some() {
                v.push((lo + gap, lo));
            }
        }
    }
    v
}

pub const LUT_OPS: [BinaryOp; 3] = [BinaryOp::And, BinaryOp::Orr, BinaryOp::Xor];

fn op_name(op: BinaryOp) -> &'static str {
    match op {
        BinaryOp::And => "and",
        BinaryOp::Orr => "orr",
        BinaryOp::Xor => "xor",
        _ => "?",
    }
}

fn logical(op: BinaryOp, a: bool, b: bool) -> bool {
    match op {
        BinaryOp::And => a & b,
        BinaryOp::Orr => a | b,
        _ => a ^ b,
    }
}

/// One look-up table: index word (field value shifted to `pattern_lo`) to
/// stored word. Cells whose index is not a valid pair hold the poison 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LutSpec {
    pub op: &'static str,
    pub base: u32,
    pub entries: BTreeMap<Word, Word>,
}

impl LutSpec {
    pub fn get(&self, index: Word) -> Option<Word> {
        self.entries.get(&index).copied()
    }

    pub fn cells(&self) -> impl Iterator<Item = (u32, Word)> + '_ {
        self.entries.iter().map(|(i, v)| (self.base + i, *v))
    }
}

/// Base address of the `slot`-th table.
pub fn table_base(cfg: &DplConfig, slot: u32) -> u32 {
    let lo = cfg.pattern_lo;
    let block = 1u32 << (lo + 4);
    if cfg.compact && lo >= 1 {
        let per = 1u32 << lo;
        cfg.lut_base + (slot / per) * block + slot % per
    } else {
        cfg.lut_base + slot * block
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransformError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("instruction {index}: register r{reg} is reserved for DPL macros")]
    ReservedRegister { index: usize, reg: u8 },
    #[error("instruction {index}: literal #{value} has no DPL encoding (only 0 and 1; mark public data with ;@public)")]
    Literal { index: usize, value: Word },
    #[error("instruction {index}: `{inst}` cannot be expanded")]
    NotExpandable { index: usize, inst: String },
    #[error("look-up table cell @{address} overlaps data used by the program")]
    Overlap { address: u32 },
    #[error("strict mode: {0}")]
    Strict(String),
}

/// Per-instruction decision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Expand,
    RewriteNot,
    Keep,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Warning {
    pub index: usize,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Classification {
    pub actions: Vec<Action>,
    pub warnings: Vec<Warning>,
}

/// Decides what happens to each instruction and reports sensitive data
/// reaching arithmetic, branches or addresses.
pub fn classify(p: &Program) -> Classification {
    let mut actions = Vec::with_capacity(p.len());
    for (i, inst) in p.instructions().enumerate() {
        let public = p.directives_at(i).contains(&Directive::Public);
        actions.push(match inst {
            _ if public => Action::Keep,
            Instruction::Binary { op, .. } if op.is_logical() => Action::Expand,
            Instruction::Unary {
                op: UnaryOp::Not, ..
            } => Action::RewriteNot,
            _ => Action::Keep,
        });
    }
    Classification {
        actions,
        warnings: taint_warnings(p),
    }
}

struct Taint {
    locs: HashSet<Loc>,
    /// Some cell written through a register-based address is tainted.
    indirect: bool,
}

impl Taint {
    fn reads(&self, op: &Operand) -> bool {
        match op {
            Operand::Reg(r) => self.locs.contains(&Loc::Reg(*r)),
            Operand::Imm(_) => false,
            Operand::Mem(a) => self.indirect || self.locs.contains(&Loc::Mem(*a)),
            Operand::Ind {
                base: IndBase::Imm(b),
                offset,
            } => {
                let a = (*b as i64 + *offset as i64).max(0) as u32;
                self.indirect || self.locs.contains(&Loc::Mem(a))
            }
            Operand::Ind {
                base: IndBase::Reg(_),
                ..
            } => self.indirect || self.locs.iter().any(|l| matches!(l, Loc::Mem(_))),
        }
    }

    fn write(&mut self, op: &Operand) -> bool {
        match op {
            Operand::Reg(r) => self.locs.insert(Loc::Reg(*r)),
            Operand::Mem(a) => self.locs.insert(Loc::Mem(*a)),
            Operand::Ind {
                base: IndBase::Imm(b),
                offset,
            } => self
                .locs
                .insert(Loc::Mem((*b as i64 + *offset as i64).max(0) as u32)),
            Operand::Ind { .. } => !std::mem::replace(&mut self.indirect, true),
            Operand::Imm(_) => false,
        }
    }

    fn base_tainted(&self, op: &Operand) -> bool {
        matches!(op, Operand::Ind { base: IndBase::Reg(r), .. } if self.locs.contains(&Loc::Reg(*r)))
    }
}

fn taint_warnings(p: &Program) -> Vec<Warning> {
    let mut t = Taint {
        locs: p.sensitive_cells().into_iter().collect(),
        indirect: false,
    };
    if t.locs.is_empty() {
        return Vec::new();
    }
    let insts: Vec<&Instruction> = p.instructions().collect();
    loop {
        let mut changed = false;
        for inst in &insts {
            if let Some(d) = inst.destination() {
                if inst.sources().iter().any(|s| t.reads(s)) {
                    changed |= t.write(&d);
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut out = Vec::new();
    for (i, inst) in insts.iter().enumerate() {
        let srcs = inst.sources();
        let arith = matches!(
            inst,
            Instruction::Binary {
                op: BinaryOp::Add | BinaryOp::Mul,
                ..
            }
        );
        let branch = matches!(inst, Instruction::Branch { .. });
        if (arith || branch) && srcs.iter().any(|s| t.reads(s)) {
            out.push(Warning {
                index: i,
                message: format!("`{inst}` reads sensitive data in {}", if branch { "a branch condition" } else { "arithmetic" }),
            });
        }
        if inst.operands().iter().any(|o| t.base_tainted(o)) {
            out.push(Warning {
                index: i,
                message: format!("`{inst}` uses a sensitive register as an address"),
            });
        }
    }
    out
}

fn encode_literal(op: Operand, cfg: &DplConfig, index: usize) -> Result<Operand, TransformError> {
    match op {
        Operand::Imm(v @ (0 | 1)) => Ok(Operand::Imm(cfg.encode(v == 1))),
        Operand::Imm(value) => Err(TransformError::Literal { index, value }),
        o => Ok(o),
    }
}

/// The DPL macro for `d = a op b`, reading the table at `table`.
pub fn expand_macro(
    inst: &Instruction,
    cfg: &DplConfig,
    table: u32,
) -> Result<Vec<Instruction>, TransformError> {
    let layout = cfg.validate()?;
    let Instruction::Binary { op, dst, lhs, rhs } = inst else {
        return Err(TransformError::NotExpandable {
            index: 0,
            inst: inst.to_string(),
        });
    };
    if !op.is_logical() {
        return Err(TransformError::NotExpandable {
            index: 0,
            inst: inst.to_string(),
        });
    }
    let [s1, s2, s3] = cfg.scratch.map(Operand::Reg);
    let zero = Operand::Reg(cfg.zero_reg);
    let mov = |d: Operand, s: Operand| Instruction::Unary {
        op: UnaryOp::Mov,
        dst: d,
        src: s,
    };
    let bin = |op: BinaryOp, d: Operand, a: Operand, b: Operand| Instruction::Binary {
        op,
        dst: d,
        lhs: a,
        rhs: b,
    };
    let mask = Operand::Imm(layout.mask);
    let one = Operand::Imm(1);
    let mut out = vec![
        mov(s1, zero),
        mov(s1, *lhs),
        bin(BinaryOp::And, s1, s1, mask),
    ];
    if layout.mode == ShiftMode::LeftA {
        out.extend((0..layout.shifts).map(|_| bin(BinaryOp::Lsl, s1, s1, one)));
    }
    out.extend([mov(s2, zero), mov(s2, *rhs), bin(BinaryOp::And, s2, s2, mask)]);
    if layout.mode == ShiftMode::RightB {
        out.extend((0..layout.shifts).map(|_| bin(BinaryOp::Lsr, s2, s2, one)));
    }
    let Operand::Reg(r1) = s1 else { unreachable!() };
    out.extend([
        bin(BinaryOp::Orr, s1, s1, s2),
        mov(s3, zero),
        mov(
            s3,
            Operand::Ind {
                base: IndBase::Reg(r1),
                offset: table as i32,
            },
        ),
        mov(*dst, zero),
        mov(*dst, s3),
    ]);
    Ok(out)
}

/// Tables for the used operations and the prologue that stores them.
pub fn gen_luts(cfg: &DplConfig, ops_used: &[BinaryOp]) -> Result<(Vec<LutSpec>, Vec<Instruction>), ConfigError> {
    let layout = cfg.validate()?;
    let lo = cfg.pattern_lo;
    let mut luts = Vec::new();
    let mut slot = 0;
    for op in LUT_OPS {
        if !ops_used.contains(&op) {
            continue;
        }
        let mut entries: BTreeMap<Word, Word> = (0..16).map(|k| (k << lo, 0)).collect();
        for a in [false, true] {
            for b in [false, true] {
                let idx = cfg.pack(&layout, cfg.encode(a), cfg.encode(b));
                entries.insert(idx, cfg.encode(logical(op, a, b)));
            }
        }
        luts.push(LutSpec {
            op: op_name(op),
            base: table_base(cfg, slot),
            entries,
        });
        slot += 1;
    }
    let init = luts
        .iter()
        .flat_map(|l| l.cells())
        .map(|(addr, v)| Instruction::Unary {
            op: UnaryOp::Mov,
            dst: Operand::Mem(addr),
            src: Operand::Imm(v),
        })
        .collect();
    Ok((luts, init))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransformReport {
    pub input_instructions: usize,
    pub output_instructions: usize,
    pub prologue_instructions: usize,
    pub expanded_count: usize,
    pub rewritten_not_count: usize,
    /// Logical instructions left alone because they are public.
    pub skipped_count: usize,
    pub lut_bytes: usize,
    /// Output length without the prologue over input length.
    pub code_growth_ratio: f64,
    pub layout: Layout,
    pub luts: Vec<LutSpec>,
    pub warnings: Vec<Warning>,
}

fn registers_of(op: &Operand) -> Option<u8> {
    match op {
        Operand::Reg(r) | Operand::Ind { base: IndBase::Reg(r), .. } => Some(*r),
        _ => None,
    }
}

fn static_cells(p: &Program) -> BTreeSet<u32> {
    let mut cells: BTreeSet<u32> = p
        .sensitive_cells()
        .into_iter()
        .chain(p.output_cells())
        .filter_map(|l| match l {
            Loc::Mem(a) => Some(a),
            Loc::Reg(_) => None,
        })
        .collect();
    for inst in p.instructions() {
        for o in inst.operands() {
            match o {
                Operand::Mem(a) => {
                    cells.insert(a);
                }
                Operand::Ind {
                    base: IndBase::Imm(b),
                    offset,
                } => {
                    cells.insert((b as i64 + offset as i64).max(0) as u32);
                }
                _ => {}
            }
        }
    }
    cells
}

/// Rewrites `p` into DPL form.
pub fn transform(p: &Program, cfg: &DplConfig) -> Result<(Program, TransformReport), TransformError> {
    let layout = cfg.validate()?;
    let class = classify(p);
    if cfg.strict {
        if let Some(w) = class.warnings.first() {
            return Err(TransformError::Strict(format!("instruction {}: {}", w.index, w.message)));
        }
    }
    let reserved = [cfg.scratch[0], cfg.scratch[1], cfg.scratch[2], cfg.zero_reg];
    for (i, inst) in p.instructions().enumerate() {
        for o in inst.operands() {
            if let Some(r) = registers_of(&o).filter(|r| reserved.contains(r)) {
                return Err(TransformError::ReservedRegister { index: i, reg: r });
            }
        }
    }

    let mut used = Vec::new();
    for (inst, a) in p.instructions().zip(&class.actions) {
        if let (Instruction::Binary { op, .. }, Action::Expand) = (inst, a) {
            if !used.contains(op) {
                used.push(*op);
            }
        }
    }
    let (luts, init) = gen_luts(cfg, &used)?;
    let data = static_cells(p);
    for l in &luts {
        for (addr, _) in l.cells() {
            if data.contains(&addr) {
                return Err(TransformError::Overlap { address: addr });
            }
        }
    }
    let base_of = |op: BinaryOp| {
        luts.iter()
            .find(|l| l.op == op_name(op))
            .map(|l| l.base)
            .expect("table generated for every expanded op")
    };

    let enc = layout.encoding;
    let mut prologue = vec![Line::comment(format!("@encoding zero={} one={}", enc.zero, enc.one))];
    let mark = |i: Instruction| Line::inst(i).with_comment(Some("@prologue".into()));
    prologue.push(mark(Instruction::Unary {
        op: UnaryOp::Mov,
        dst: Operand::Reg(cfg.zero_reg),
        src: Operand::Imm(0),
    }));
    prologue.extend(init.into_iter().map(mark));
    let n_prologue = prologue.len() - 1;

    // expansion of each instruction, then absolute targets are remapped
    let mut bodies: Vec<Vec<Instruction>> = Vec::with_capacity(p.len());
    let (mut expanded, mut nots, mut skipped) = (0, 0, 0);
    for (i, (inst, action)) in p.instructions().zip(&class.actions).enumerate() {
        let body = match action {
            Action::Expand => {
                expanded += 1;
                let Instruction::Binary { op, dst, lhs, rhs } = inst else { unreachable!() };
                let enc_inst = Instruction::Binary {
                    op: *op,
                    dst: *dst,
                    lhs: encode_literal(*lhs, cfg, i)?,
                    rhs: encode_literal(*rhs, cfg, i)?,
                };
                expand_macro(&enc_inst, cfg, base_of(*op))?
            }
            Action::RewriteNot => {
                nots += 1;
                let Instruction::Unary { dst, src, .. } = inst else { unreachable!() };
                let src = encode_literal(*src, cfg, i)?;
                let xor = Instruction::Binary {
                    op: BinaryOp::Xor,
                    dst: *dst,
                    lhs: src,
                    rhs: Operand::Imm(layout.mask),
                };
                if *dst == src {
                    vec![xor]
                } else {
                    vec![
                        Instruction::Unary {
                            op: UnaryOp::Mov,
                            dst: *dst,
                            src: Operand::Reg(cfg.zero_reg),
                        },
                        xor,
                    ]
                }
            }
            Action::Keep => {
                let public = p.directives_at(i).contains(&Directive::Public);
                if public && matches!(inst, Instruction::Binary { op, .. } if op.is_logical()) {
                    skipped += 1;
                }
                match inst {
                    Instruction::Unary {
                        op: UnaryOp::Mov,
                        dst,
                        src,
                    } if !public => vec![Instruction::Unary {
                        op: UnaryOp::Mov,
                        dst: *dst,
                        src: encode_literal(*src, cfg, i)?,
                    }],
                    _ => vec![inst.clone()],
                }
            }
        };
        bodies.push(body);
    }
    let mut starts = Vec::with_capacity(bodies.len() + 1);
    let mut at = n_prologue;
    for b in &bodies {
        starts.push(at);
        at += b.len();
    }
    starts.push(at);

    let mut lines = prologue;
    let mut bodies = bodies.into_iter();
    for line in p.lines() {
        if line.inst.is_none() {
            lines.push(line.clone());
            continue;
        }
        let body = bodies.next().expect("one body per instruction");
        for (k, inst) in body.into_iter().enumerate() {
            let inst = match inst.target() {
                Some(Target::Abs(t)) => {
                    let t = starts[*t];
                    inst.map_target(|_| Target::Abs(t))
                }
                _ => inst,
            };
            let mut l = Line::inst(inst);
            if k == 0 {
                l = l.with_label(line.label.clone()).with_comment(line.comment.clone());
            }
            lines.push(l);
        }
    }
    let out = Program::from_lines(lines).expect("transformer emits well-formed lines");
    let body_len = out.len() - n_prologue;
    let report = TransformReport {
        input_instructions: p.len(),
        output_instructions: out.len(),
        prologue_instructions: n_prologue,
        expanded_count: expanded,
        rewritten_not_count: nots,
        skipped_count: skipped,
        lut_bytes: luts.len() * 16,
        code_growth_ratio: if p.is_empty() {
            1.0
        } else {
            body_len as f64 / p.len() as f64
        },
        layout,
        luts,
        warnings: class.warnings,
    };
    Ok((out, report))
}

/// Variant of a plain bitsliced program computing with logical 1 stored as
/// `2^bit`: literal 1 becomes `2^bit` and `not` flips only that bit.
pub fn single_slot_variant(p: &Program, bit: u32) -> Result<Program, TransformError> {
    let one = 1 << bit;
    let enc = |op: Operand, index: usize| match op {
        Operand::Imm(0) => Ok(Operand::Imm(0)),
        Operand::Imm(1) => Ok(Operand::Imm(one)),
        Operand::Imm(value) => Err(TransformError::Literal { index, value }),
        o => Ok(o),
    };
    let mut lines = vec![Line::comment(format!("@encoding zero=0 one={one}"))];
    let mut i = 0;
    for line in p.lines() {
        let Some(inst) = &line.inst else {
            lines.push(line.clone());
            continue;
        };
        let public = p.directives_at(i).contains(&Directive::Public);
        let new = match inst {
            _ if public => inst.clone(),
            Instruction::Unary {
                op: UnaryOp::Not,
                dst,
                src,
            } => Instruction::Binary {
                op: BinaryOp::Xor,
                dst: *dst,
                lhs: enc(*src, i)?,
                rhs: Operand::Imm(one),
            },
            Instruction::Unary { op, dst, src } => Instruction::Unary {
                op: *op,
                dst: *dst,
                src: enc(*src, i)?,
            },
            Instruction::Binary { op, dst, lhs, rhs } if op.is_logical() => Instruction::Binary {
                op: *op,
                dst: *dst,
                lhs: enc(*lhs, i)?,
                rhs: enc(*rhs, i)?,
            },
            _ => inst.clone(),
        };
        lines.push(Line {
            label: line.label.clone(),
            inst: Some(new),
            comment: line.comment.clone(),
        });
        i += 1;
    }
    Ok(Program::from_lines(lines).expect("well-formed lines"))
}
