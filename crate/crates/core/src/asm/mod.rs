//! Generic assembly language: AST, parser, printer and linker.
//!
//! The syntax is line oriented:
//!
//! ```text
//! Prog    ::= ( Label? Inst? ( ';' <comment> )? '\n' )*
//! Inst    ::= 'nop' | 'jmp' Addr | Op2 Lval Val | Op3 Lval Val Val | Br Val Val Addr
//! Val     ::= Lval | '#' <imm>
//! Lval    ::= 'r' <n> | '@' <addr> | '!' Val ( ',' <offset> )?
//! Addr    ::= '#' <index> | <label>
//! ```
//!
//! Comments starting with `@` carry directives (`;@sensitive @256..@319`,
//! `;@public`, `;@output r3`, ...), see [`Directive`].

mod adapter;
mod parse;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adapter::{adapter_by_name, adapters, AvrLikeAdapter, GenericAdapter, SyntaxAdapter};
pub use parse::parse;

/// Machine word. Only the low `word_width` bits are meaningful.
pub type Word = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum IndBase {
    Reg(u8),
    Imm(Word),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Operand {
    Reg(u8),
    Imm(Word),
    Mem(u32),
    /// `!base,offset`: memory at `value(base) + offset`.
    Ind { base: IndBase, offset: i32 },
}

impl Operand {
    pub fn is_lval(&self) -> bool {
        !matches!(self, Operand::Imm(_))
    }

    pub fn touches_memory(&self) -> bool {
        matches!(self, Operand::Mem(_) | Operand::Ind { .. })
    }

    pub fn reads_register(&self, reg: u8) -> bool {
        match self {
            Operand::Reg(r) => *r == reg,
            Operand::Ind { base: IndBase::Reg(r), .. } => *r == reg,
            _ => false,
        }
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Reg(r) => write!(f, "r{r}"),
            Operand::Imm(v) => write!(f, "#{v}"),
            Operand::Mem(a) => write!(f, "@{a}"),
            Operand::Ind { base, offset } => {
                match base {
                    IndBase::Reg(r) => write!(f, "!r{r}")?,
                    IndBase::Imm(v) => write!(f, "!#{v}")?,
                }
                if *offset != 0 {
                    write!(f, ",{offset}")?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Opcode {
    Nop,
    Jmp,
    Not,
    Mov,
    And,
    Orr,
    Xor,
    Lsl,
    Lsr,
    Add,
    Mul,
    Beq,
    Bne,
}

impl Opcode {
    pub const ALL: [Opcode; 13] = [
        Opcode::Nop,
        Opcode::Jmp,
        Opcode::Not,
        Opcode::Mov,
        Opcode::And,
        Opcode::Orr,
        Opcode::Xor,
        Opcode::Lsl,
        Opcode::Lsr,
        Opcode::Add,
        Opcode::Mul,
        Opcode::Beq,
        Opcode::Bne,
    ];

    pub fn mnemonic(self) -> &'static str {
        match self {
            Opcode::Nop => "nop",
            Opcode::Jmp => "jmp",
            Opcode::Not => "not",
            Opcode::Mov => "mov",
            Opcode::And => "and",
            Opcode::Orr => "orr",
            Opcode::Xor => "xor",
            Opcode::Lsl => "lsl",
            Opcode::Lsr => "lsr",
            Opcode::Add => "add",
            Opcode::Mul => "mul",
            Opcode::Beq => "beq",
            Opcode::Bne => "bne",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<Opcode> {
        Opcode::ALL.iter().copied().find(|op| op.mnemonic() == s)
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UnaryOp {
    Not,
    Mov,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BinaryOp {
    And,
    Orr,
    Xor,
    Lsl,
    Lsr,
    Add,
    Mul,
}

impl BinaryOp {
    pub fn is_logical(self) -> bool {
        matches!(self, BinaryOp::And | BinaryOp::Orr | BinaryOp::Xor)
    }

    /// Applies the operation modulo `2^width`.
    pub fn apply(self, a: Word, b: Word, mask: Word) -> Word {
        let width = mask.count_ones();
        let r = match self {
            BinaryOp::And => a & b,
            BinaryOp::Orr => a | b,
            BinaryOp::Xor => a ^ b,
            BinaryOp::Lsl => {
                if b >= width {
                    0
                } else {
                    a << b
                }
            }
            BinaryOp::Lsr => {
                if b >= width {
                    0
                } else {
                    (a & mask) >> b
                }
            }
            BinaryOp::Add => a.wrapping_add(b),
            BinaryOp::Mul => a.wrapping_mul(b),
        };
        r & mask
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Cond {
    Eq,
    Ne,
}

impl Cond {
    pub fn holds(self, a: Word, b: Word) -> bool {
        match self {
            Cond::Eq => a == b,
            Cond::Ne => a != b,
        }
    }
}

/// Branch target before linking.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Target {
    Label(String),
    Abs(usize),
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Label(l) => f.write_str(l),
            Target::Abs(i) => write!(f, "#{i}"),
        }
    }
}

/// One instruction. `A` is the branch-target representation: [`Target`]
/// in source programs, an absolute instruction index once linked.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Instruction<A = Target> {
    Nop,
    Jmp(A),
    Unary {
        op: UnaryOp,
        dst: Operand,
        src: Operand,
    },
    Binary {
        op: BinaryOp,
        dst: Operand,
        lhs: Operand,
        rhs: Operand,
    },
    Branch {
        cond: Cond,
        lhs: Operand,
        rhs: Operand,
        target: A,
    },
}

impl<A> Instruction<A> {
    pub fn opcode(&self) -> Opcode {
        match self {
            Instruction::Nop => Opcode::Nop,
            Instruction::Jmp(_) => Opcode::Jmp,
            Instruction::Unary { op: UnaryOp::Not, .. } => Opcode::Not,
            Instruction::Unary { op: UnaryOp::Mov, .. } => Opcode::Mov,
            Instruction::Binary { op, .. } => match op {
                BinaryOp::And => Opcode::And,
                BinaryOp::Orr => Opcode::Orr,
                BinaryOp::Xor => Opcode::Xor,
                BinaryOp::Lsl => Opcode::Lsl,
                BinaryOp::Lsr => Opcode::Lsr,
                BinaryOp::Add => Opcode::Add,
                BinaryOp::Mul => Opcode::Mul,
            },
            Instruction::Branch { cond: Cond::Eq, .. } => Opcode::Beq,
            Instruction::Branch { cond: Cond::Ne, .. } => Opcode::Bne,
        }
    }

    pub fn destination(&self) -> Option<Operand> {
        match self {
            Instruction::Unary { dst, .. } | Instruction::Binary { dst, .. } => Some(*dst),
            _ => None,
        }
    }

    /// Value operands in source order (destination excluded).
    pub fn sources(&self) -> Vec<Operand> {
        match self {
            Instruction::Nop | Instruction::Jmp(_) => vec![],
            Instruction::Unary { src, .. } => vec![*src],
            Instruction::Binary { lhs, rhs, .. } | Instruction::Branch { lhs, rhs, .. } => {
                vec![*lhs, *rhs]
            }
        }
    }

    /// All operands in textual order, destination first.
    pub fn operands(&self) -> Vec<Operand> {
        let mut v: Vec<Operand> = self.destination().into_iter().collect();
        v.extend(self.sources());
        v
    }

    pub fn target(&self) -> Option<&A> {
        match self {
            Instruction::Jmp(t) | Instruction::Branch { target: t, .. } => Some(t),
            _ => None,
        }
    }

    pub fn map_target<B>(&self, f: impl FnOnce(&A) -> B) -> Instruction<B> {
        match self {
            Instruction::Nop => Instruction::Nop,
            Instruction::Jmp(t) => Instruction::Jmp(f(t)),
            Instruction::Unary { op, dst, src } => Instruction::Unary {
                op: *op,
                dst: *dst,
                src: *src,
            },
            Instruction::Binary { op, dst, lhs, rhs } => Instruction::Binary {
                op: *op,
                dst: *dst,
                lhs: *lhs,
                rhs: *rhs,
            },
            Instruction::Branch {
                cond,
                lhs,
                rhs,
                target,
            } => Instruction::Branch {
                cond: *cond,
                lhs: *lhs,
                rhs: *rhs,
                target: f(target),
            },
        }
    }

    /// Rewrites every operand (destination included) through `f`.
    pub fn map_operands(&self, mut f: impl FnMut(Operand) -> Operand) -> Instruction<A>
    where
        A: Clone,
    {
        match self {
            Instruction::Nop => Instruction::Nop,
            Instruction::Jmp(t) => Instruction::Jmp(t.clone()),
            Instruction::Unary { op, dst, src } => Instruction::Unary {
                op: *op,
                dst: f(*dst),
                src: f(*src),
            },
            Instruction::Binary { op, dst, lhs, rhs } => Instruction::Binary {
                op: *op,
                dst: f(*dst),
                lhs: f(*lhs),
                rhs: f(*rhs),
            },
            Instruction::Branch {
                cond,
                lhs,
                rhs,
                target,
            } => Instruction::Branch {
                cond: *cond,
                lhs: f(*lhs),
                rhs: f(*rhs),
                target: target.clone(),
            },
        }
    }
}

fn fmt_instruction(
    f: &mut fmt::Formatter<'_>,
    opcode: Opcode,
    operands: &[Operand],
    target: Option<String>,
) -> fmt::Result {
    f.write_str(opcode.mnemonic())?;
    for op in operands {
        write!(f, " {op}")?;
    }
    if let Some(t) = target {
        write!(f, " {t}")?;
    }
    Ok(())
}

impl fmt::Display for Instruction<Target> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt_instruction(
            f,
            self.opcode(),
            &self.operands(),
            self.target().map(|t| t.to_string()),
        )
    }
}

impl fmt::Display for Instruction<usize> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt_instruction(
            f,
            self.opcode(),
            &self.operands(),
            self.target().map(|t| format!("#{t}")),
        )
    }
}

/// A register or a direct memory cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Loc {
    Reg(u8),
    Mem(u32),
}

impl fmt::Display for Loc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Loc::Reg(r) => write!(f, "r{r}"),
            Loc::Mem(a) => write!(f, "@{a}"),
        }
    }
}

/// How logical 0 and 1 are stored in a cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Encoding {
    pub zero: Word,
    pub one: Word,
}

impl Encoding {
    pub const PLAIN: Encoding = Encoding { zero: 0, one: 1 };

    pub fn encode(&self, bit: bool) -> Word {
        if bit {
            self.one
        } else {
            self.zero
        }
    }

    pub fn decode(&self, word: Word) -> Option<bool> {
        if word == self.one {
            Some(true)
        } else if word == self.zero {
            Some(false)
        } else {
            None
        }
    }
}

/// Comment-carried annotations.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Directive {
    /// Cells holding secret or plaintext-dependent inputs.
    Sensitive(Vec<Loc>),
    /// The instruction handles public data only; never DPL-expanded.
    Public,
    /// Cells holding the program result.
    Output(Vec<Loc>),
    /// Instruction emitted by the transformer before any data is touched.
    Prologue,
    /// Encoding of logical bits used by the whole program.
    Encoding(Encoding),
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Line {
    pub label: Option<String>,
    pub inst: Option<Instruction>,
    pub comment: Option<String>,
}

impl Line {
    pub fn inst(inst: Instruction) -> Line {
        Line {
            inst: Some(inst),
            ..Line::default()
        }
    }

    pub fn comment(text: impl Into<String>) -> Line {
        Line {
            comment: Some(text.into()),
            ..Line::default()
        }
    }

    pub fn with_label(mut self, label: Option<String>) -> Line {
        self.label = label;
        self
    }

    pub fn with_comment(mut self, comment: Option<String>) -> Line {
        self.comment = comment;
        self
    }
}

impl fmt::Display for Line {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        if let Some(l) = &self.label {
            write!(f, "{l}:")?;
            first = false;
        }
        if let Some(i) = &self.inst {
            if !first {
                f.write_str(" ")?;
            }
            write!(f, "{i}")?;
            first = false;
        }
        if let Some(c) = &self.comment {
            if !first {
                f.write_str(" ")?;
            }
            if c.starts_with('@') || c.is_empty() {
                write!(f, ";{c}")?;
            } else {
                write!(f, "; {c}")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("unknown opcode `{0}`")]
    UnknownOpcode(String),
    #[error("`{opcode}` expects {expected} operand(s), found {found}")]
    Arity {
        opcode: Opcode,
        expected: usize,
        found: usize,
    },
    #[error("malformed operand `{0}`")]
    BadOperand(String),
    #[error("destination must be a register or memory operand, found `{0}`")]
    ImmediateDestination(String),
    #[error("malformed number `{0}`")]
    BadNumber(String),
    #[error("malformed label `{0}`")]
    BadLabel(String),
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("malformed directive `{0}`")]
    BadDirective(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{line}:{column}: {kind}")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub kind: ParseErrorKind,
}

/// A parsed source program.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Program {
    lines: Vec<Line>,
    labels: BTreeMap<String, usize>,
    directives: BTreeMap<usize, Vec<Directive>>,
    inst_count: usize,
}

impl Program {
    /// Builds a program from lines, computing the label and directive tables.
    pub fn from_lines(lines: Vec<Line>) -> Result<Program, ParseError> {
        let mut labels = BTreeMap::new();
        let mut directives: BTreeMap<usize, Vec<Directive>> = BTreeMap::new();
        let mut idx = 0usize;
        for (n, line) in lines.iter().enumerate() {
            if let Some(l) = &line.label {
                if !parse::is_label_name(l) {
                    return Err(ParseError {
                        line: n + 1,
                        column: 1,
                        kind: ParseErrorKind::BadLabel(l.clone()),
                    });
                }
                if labels.insert(l.clone(), idx).is_some() {
                    return Err(ParseError {
                        line: n + 1,
                        column: 1,
                        kind: ParseErrorKind::DuplicateLabel(l.clone()),
                    });
                }
            }
            if let Some(c) = &line.comment {
                if let Some(d) = parse::parse_directive(c).map_err(|kind| ParseError {
                    line: n + 1,
                    column: 1,
                    kind,
                })? {
                    directives.entry(idx).or_default().push(d);
                }
            }
            if line.inst.is_some() {
                idx += 1;
            }
        }
        Ok(Program {
            lines,
            labels,
            directives,
            inst_count: idx,
        })
    }

    pub fn empty() -> Program {
        Program::from_lines(Vec::new()).expect("empty program is valid")
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn into_lines(self) -> Vec<Line> {
        self.lines
    }

    pub fn len(&self) -> usize {
        self.inst_count
    }

    pub fn is_empty(&self) -> bool {
        self.inst_count == 0
    }

    pub fn labels(&self) -> &BTreeMap<String, usize> {
        &self.labels
    }

    /// Directives keyed by the instruction index they are anchored to.
    pub fn directives(&self) -> &BTreeMap<usize, Vec<Directive>> {
        &self.directives
    }

    pub fn directives_at(&self, index: usize) -> &[Directive] {
        self.directives.get(&index).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn instructions(&self) -> impl Iterator<Item = &Instruction> {
        self.lines.iter().filter_map(|l| l.inst.as_ref())
    }

    pub fn sensitive_cells(&self) -> Vec<Loc> {
        self.collect_locs(|d| match d {
            Directive::Sensitive(v) => Some(v),
            _ => None,
        })
    }

    pub fn output_cells(&self) -> Vec<Loc> {
        self.collect_locs(|d| match d {
            Directive::Output(v) => Some(v),
            _ => None,
        })
    }

    pub fn encoding(&self) -> Option<Encoding> {
        self.directives.values().flatten().find_map(|d| match d {
            Directive::Encoding(e) => Some(*e),
            _ => None,
        })
    }

    fn collect_locs(&self, pick: impl Fn(&Directive) -> Option<&Vec<Loc>>) -> Vec<Loc> {
        let mut out = Vec::new();
        for d in self.directives.values().flatten() {
            if let Some(v) = pick(d) {
                for l in v {
                    if !out.contains(l) {
                        out.push(*l);
                    }
                }
            }
        }
        out
    }

    /// Pretty-prints the program in the generic syntax.
    pub fn print(&self) -> String {
        let mut s = String::new();
        for l in &self.lines {
            s.push_str(&l.to_string());
            s.push('\n');
        }
        s
    }

    /// Replaces every label reference by its absolute instruction index.
    pub fn resolve(&self) -> Result<LinkedProgram, LinkError> {
        let len = self.inst_count;
        let mut code = Vec::with_capacity(len);
        let mut flags = Vec::with_capacity(len);
        let mut idx = 0usize;
        for line in &self.lines {
            let Some(inst) = &line.inst else { continue };
            let mut err = None;
            let linked = inst.map_target(|t| match t {
                Target::Abs(i) => {
                    if *i > len {
                        err = Some(LinkError::TargetOutOfRange {
                            index: idx,
                            target: *i,
                            len,
                        });
                    }
                    *i
                }
                Target::Label(l) => match self.labels.get(l) {
                    Some(i) => *i,
                    None => {
                        err = Some(LinkError::UndefinedLabel {
                            index: idx,
                            label: l.clone(),
                        });
                        0
                    }
                },
            });
            if let Some(e) = err {
                return Err(e);
            }
            let ds = self.directives_at(idx);
            // directives on a comment-only line apply to the next instruction
            flags.push(InstFlags {
                public: ds.contains(&Directive::Public),
                prologue: ds.contains(&Directive::Prologue),
            });
            code.push(linked);
            idx += 1;
        }
        Ok(LinkedProgram {
            code,
            flags,
            labels: self.labels.clone(),
            sensitive: self.sensitive_cells(),
            outputs: self.output_cells(),
            encoding: self.encoding(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LinkError {
    #[error("instruction {index}: undefined label `{label}`")]
    UndefinedLabel { index: usize, label: String },
    #[error("instruction {index}: branch target #{target} out of range (program has {len} instructions)")]
    TargetOutOfRange {
        index: usize,
        target: usize,
        len: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct InstFlags {
    pub public: bool,
    pub prologue: bool,
}

/// Executable form: absolute branch targets plus the directive summary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LinkedProgram {
    pub code: Vec<Instruction<usize>>,
    pub flags: Vec<InstFlags>,
    pub labels: BTreeMap<String, usize>,
    pub sensitive: Vec<Loc>,
    pub outputs: Vec<Loc>,
    pub encoding: Option<Encoding>,
}

impl LinkedProgram {
    pub fn len(&self) -> usize {
        self.code.len()
    }

    pub fn is_empty(&self) -> bool {
        self.code.is_empty()
    }

    pub fn label(&self, name: &str) -> Option<usize> {
        self.labels.get(name).copied()
    }

    /// Checks operand ranges against a machine shape.
    pub fn check_bounds(&self, registers: usize, memory: usize, word_width: u32) -> Result<(), BoundsError> {
        let mask = word_mask(word_width);
        let check = |index: usize, op: &Operand| -> Result<(), BoundsError> {
            let bad = match op {
                Operand::Reg(r) => (*r as usize) >= registers,
                Operand::Imm(v) => *v & !mask != 0,
                Operand::Mem(a) => (*a as usize) >= memory,
                Operand::Ind { base, .. } => match base {
                    IndBase::Reg(r) => (*r as usize) >= registers,
                    IndBase::Imm(_) => false,
                },
            };
            if bad {
                Err(BoundsError {
                    index,
                    operand: op.to_string(),
                })
            } else {
                Ok(())
            }
        };
        for (i, inst) in self.code.iter().enumerate() {
            for op in inst.operands() {
                check(i, &op)?;
            }
        }
        for loc in self.sensitive.iter().chain(&self.outputs) {
            let op = match loc {
                Loc::Reg(r) => Operand::Reg(*r),
                Loc::Mem(a) => Operand::Mem(*a),
            };
            check(usize::MAX, &op)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("instruction {index}: operand `{operand}` out of range for the machine")]
pub struct BoundsError {
    pub index: usize,
    pub operand: String,
}

pub fn word_mask(width: u32) -> Word {
    if width >= 32 {
        Word::MAX
    } else {
        (1 << width) - 1
    }
}
