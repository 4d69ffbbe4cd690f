//! Balance verification by set-valued symbolic execution.
//!
//! Every cell holds the set of words it may contain. An instruction is
//! evaluated once per joint choice of the cells it reads, so an update of a
//! register from its own old value keeps the relation between old and new
//! values; cells are otherwise tracked independently.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use smallvec::{smallvec, SmallVec};

use crate::asm::{
    word_mask, Encoding, IndBase, Instruction, LinkedProgram, Loc, Operand, UnaryOp, Word,
};
use crate::machine::{cycle_leakage, EventKind, Machine, MachineConfig, MachineState};

/// Sorted set of words.
pub type ValueSet = SmallVec<[Word; 4]>;

fn singleton(v: Word) -> ValueSet {
    smallvec![v]
}

fn insert(set: &mut ValueSet, v: Word) {
    if let Err(i) = set.binary_search(&v) {
        set.insert(i, v);
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SymbolicState {
    pub registers: Vec<ValueSet>,
    pub memory: Vec<ValueSet>,
    pub pc: usize,
    pub cycle: u64,
    /// Largest set written so far.
    pub max_set_size: usize,
}

impl SymbolicState {
    /// All cells `{0}` except the given ones, which may hold either bit.
    pub fn new(cfg: &MachineConfig, sensitive: &[Loc], encoding: Encoding) -> SymbolicState {
        let mut st = SymbolicState {
            registers: vec![singleton(0); cfg.registers],
            memory: vec![singleton(0); cfg.memory],
            pc: 0,
            cycle: 0,
            max_set_size: 1,
        };
        let mut both = singleton(encoding.zero);
        insert(&mut both, encoding.one);
        for l in sensitive {
            st.set(*l, both.clone());
        }
        st
    }

    /// Initial state for a linked program: its sensitive cells with its
    /// declared encoding (plain 0/1 when none).
    pub fn for_program(program: &LinkedProgram, cfg: &MachineConfig) -> SymbolicState {
        SymbolicState::new(cfg, &program.sensitive, program.encoding.unwrap_or(Encoding::PLAIN))
    }

    pub fn get(&self, loc: Loc) -> Option<&ValueSet> {
        match loc {
            Loc::Reg(r) => self.registers.get(r as usize),
            Loc::Mem(a) => self.memory.get(a as usize),
        }
    }

    pub fn set(&mut self, loc: Loc, v: ValueSet) {
        match loc {
            Loc::Reg(r) => self.registers[r as usize] = v,
            Loc::Mem(a) => self.memory[a as usize] = v,
        }
    }

    /// Whether a concrete state is one of the states this one describes.
    pub fn contains(&self, st: &MachineState) -> bool {
        let cells = |sym: &[ValueSet], conc: &[Word]| {
            sym.len() == conc.len() && sym.iter().zip(conc).all(|(s, v)| s.binary_search(v).is_ok())
        };
        self.pc == st.pc && cells(&self.registers, &st.registers) && cells(&self.memory, &st.memory)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Witness {
    pub old: Word,
    pub new: Word,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LeakFinding {
    pub index: usize,
    pub kind: EventKind,
    pub location: String,
    pub hd_set: Vec<u32>,
    pub hw_set: Vec<u32>,
    pub witness: [Witness; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Balanced,
    Leaky,
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BalanceReport {
    pub verdict: Verdict,
    /// Why verification stopped early, if it did.
    pub reason: Option<String>,
    pub findings: Vec<LeakFinding>,
    pub cycles: u64,
    /// Largest value set produced by any update.
    pub max_set_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VerifyOptions {
    pub max_steps: u64,
    pub cap: usize,
    /// Upper bound on joint operand choices per instruction.
    pub max_choices: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            max_steps: 10_000_000,
            cap: 16,
            max_choices: 1 << 16,
        }
    }
}

/// Reasons a symbolic step cannot proceed.
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum SymError {
    #[error("instruction {index}: branch depends on sensitive data")]
    SensitiveBranch { index: usize },
    #[error("instruction {index}: store address depends on sensitive data")]
    SensitiveStore { index: usize },
    #[error("instruction {index}: {size} possible values exceed the cap of {cap}")]
    Cap { index: usize, size: usize, cap: usize },
    #[error("instruction {index}: more than {limit} operand combinations")]
    Choices { index: usize, limit: usize },
    #[error("instruction {index}: access outside the machine ({what})")]
    Fault { index: usize, what: String },
    #[error("machine is halted")]
    Halted,
}

#[derive(Clone, Copy, Debug)]
struct Ev {
    kind: EventKind,
    loc: Loc,
    site: Operand,
    old: Word,
    new: Word,
}

struct Outcome {
    events: SmallVec<[Ev; 6]>,
    write: Option<(Loc, Word)>,
    next: usize,
}

enum Need {
    Choice(Loc),
    Fault(String),
}

struct Eval<'a> {
    st: &'a SymbolicState,
    env: &'a [(Loc, Word)],
    mask: Word,
    events: SmallVec<[Ev; 6]>,
}

impl Eval<'_> {
    fn value(&self, loc: Loc) -> Result<Word, Need> {
        if let Some((_, v)) = self.env.iter().find(|(l, _)| *l == loc) {
            return Ok(*v);
        }
        let set = self
            .st
            .get(loc)
            .ok_or_else(|| Need::Fault(loc.to_string()))?;
        if set.len() == 1 {
            Ok(set[0])
        } else {
            Err(Need::Choice(loc))
        }
    }

    fn address(&self, op: &Operand) -> Result<Option<Loc>, Need> {
        let a = match op {
            Operand::Mem(a) => *a as i64,
            Operand::Ind { base, offset } => {
                let b = match base {
                    IndBase::Reg(r) => self.value(Loc::Reg(*r))?,
                    IndBase::Imm(v) => *v & self.mask,
                };
                b as i64 + *offset as i64
            }
            _ => return Ok(None),
        };
        if a < 0 || a as usize >= self.st.memory.len() {
            return Err(Need::Fault(format!("address {a}")));
        }
        Ok(Some(Loc::Mem(a as u32)))
    }

    fn read(&mut self, op: &Operand) -> Result<Word, Need> {
        match op {
            Operand::Reg(r) => self.value(Loc::Reg(*r)),
            Operand::Imm(v) => Ok(*v & self.mask),
            _ => {
                let loc = self.address(op)?.expect("memory operand");
                let v = self.value(loc)?;
                let Loc::Mem(a) = loc else { unreachable!() };
                self.bus(loc, *op, a, v);
                Ok(v)
            }
        }
    }

    fn bus(&mut self, loc: Loc, site: Operand, address: Word, value: Word) {
        for (kind, new) in [(EventKind::AddrBus, address), (EventKind::DataBus, value)] {
            self.events.push(Ev {
                kind,
                loc,
                site,
                old: 0,
                new,
            });
        }
    }

    fn write(&mut self, op: &Operand, value: Word) -> Result<(Loc, Word), Need> {
        let value = value & self.mask;
        let (loc, kind) = match op {
            Operand::Reg(r) => (Loc::Reg(*r), EventKind::RegUpdate),
            _ => {
                let loc = self.address(op)?.expect("memory operand");
                let Loc::Mem(a) = loc else { unreachable!() };
                self.bus(loc, *op, a, value);
                (loc, EventKind::MemUpdate)
            }
        };
        let old = self.value(loc)?;
        self.events.push(Ev {
            kind,
            loc,
            site: *op,
            old,
            new: value,
        });
        Ok((loc, value))
    }

    fn run(&mut self, inst: &Instruction<usize>, pc: usize) -> Result<Outcome, Need> {
        let mut next = pc + 1;
        let mut write = None;
        match inst {
            Instruction::Nop => {}
            Instruction::Jmp(t) => next = *t,
            Instruction::Unary { op, dst, src } => {
                let v = self.read(src)?;
                let v = match op {
                    UnaryOp::Mov => v,
                    UnaryOp::Not => !v & self.mask,
                };
                write = Some(self.write(dst, v)?);
            }
            Instruction::Binary { op, dst, lhs, rhs } => {
                let a = self.read(lhs)?;
                let b = self.read(rhs)?;
                write = Some(self.write(dst, op.apply(a, b, self.mask))?);
            }
            Instruction::Branch {
                cond,
                lhs,
                rhs,
                target,
            } => {
                let a = self.read(lhs)?;
                let b = self.read(rhs)?;
                if cond.holds(a, b) {
                    next = *target;
                }
            }
        }
        Ok(Outcome {
            events: std::mem::take(&mut self.events),
            write,
            next,
        })
    }
}

fn outcomes(
    st: &SymbolicState,
    inst: &Instruction<usize>,
    mask: Word,
    opts: &VerifyOptions,
) -> Result<Vec<Outcome>, SymError> {
    let index = st.pc;
    let mut out = Vec::new();
    let mut work: Vec<SmallVec<[(Loc, Word); 8]>> = vec![SmallVec::new()];
    while let Some(env) = work.pop() {
        let mut ev = Eval {
            st,
            env: &env,
            mask,
            events: SmallVec::new(),
        };
        match ev.run(inst, index) {
            Ok(o) => {
                out.push(o);
                if out.len() > opts.max_choices {
                    return Err(SymError::Choices {
                        index,
                        limit: opts.max_choices,
                    });
                }
            }
            Err(Need::Choice(loc)) => {
                for v in st.get(loc).expect("checked by value").iter().rev() {
                    let mut e = env.clone();
                    e.push((loc, *v));
                    work.push(e);
                }
            }
            Err(Need::Fault(what)) => return Err(SymError::Fault { index, what }),
        }
    }
    Ok(out)
}

fn check_events(index: usize, outs: &[Outcome], findings: &mut Vec<LeakFinding>) {
    let n = outs[0].events.len();
    for p in 0..n {
        let first = outs[0].events[p];
        let mut hd: SmallVec<[u32; 4]> = SmallVec::new();
        let mut hw: SmallVec<[u32; 4]> = SmallVec::new();
        let mut witness: SmallVec<[(u32, u32, Witness); 2]> = SmallVec::new();
        let mut same_loc = true;
        for o in outs {
            let e = o.events[p];
            same_loc &= e.loc == first.loc;
            let d = (e.old ^ e.new).count_ones();
            let w = e.new.count_ones();
            let obs = if e.kind == EventKind::AddrBus { (w, w) } else { (d, w) };
            if !hd.contains(&d) {
                hd.push(d);
            }
            if !hw.contains(&w) {
                hw.push(w);
            }
            if witness.len() < 2 && witness.iter().all(|(a, b, _)| (*a, *b) != obs) {
                witness.push((obs.0, obs.1, Witness { old: e.old, new: e.new }));
            }
        }
        let leaks = match first.kind {
            EventKind::AddrBus | EventKind::DataBus => hw.len() > 1,
            _ => hd.len() > 1 || hw.len() > 1,
        };
        if leaks {
            hd.sort_unstable();
            hw.sort_unstable();
            let mut w = witness.into_iter().map(|(_, _, w)| w);
            findings.push(LeakFinding {
                index,
                kind: first.kind,
                location: if same_loc {
                    first.loc.to_string()
                } else {
                    first.site.to_string()
                },
                hd_set: hd.to_vec(),
                hw_set: hw.to_vec(),
                witness: [w.next().expect("two observations"), w.next().expect("two observations")],
            });
        }
    }
}

/// Executes one instruction on sets. Returns the leaks of this dynamic
/// instance; prologue instructions are executed without checks.
pub fn sym_step(
    st: &mut SymbolicState,
    program: &LinkedProgram,
    word_width: u32,
    opts: &VerifyOptions,
) -> Result<Vec<LeakFinding>, SymError> {
    let index = st.pc;
    let inst = program.code.get(index).ok_or(SymError::Halted)?;
    let outs = outcomes(st, inst, word_mask(word_width), opts)?;
    let next = outs[0].next;
    if outs.iter().any(|o| o.next != next) {
        return Err(SymError::SensitiveBranch { index });
    }
    let mut findings = Vec::new();
    if !program.flags[index].prologue {
        check_events(index, &outs, &mut findings);
    }
    if let Some((loc, _)) = outs[0].write {
        let mut set = ValueSet::new();
        for o in &outs {
            let (l, v) = o.write.expect("same instruction writes in every outcome");
            if l != loc {
                return Err(SymError::SensitiveStore { index });
            }
            insert(&mut set, v);
        }
        if set.len() > opts.cap {
            return Err(SymError::Cap {
                index,
                size: set.len(),
                cap: opts.cap,
            });
        }
        st.max_set_size = st.max_set_size.max(set.len());
        st.set(loc, set);
    }
    st.pc = next;
    st.cycle += 1;
    Ok(findings)
}

/// Runs symbolically to halt and reports every update whose Hamming
/// distance or weight depends on the sensitive inputs.
pub fn verify(
    program: &LinkedProgram,
    init: SymbolicState,
    word_width: u32,
    opts: &VerifyOptions,
) -> BalanceReport {
    let mut st = init;
    let mut merged: BTreeMap<(usize, EventKind, String), LeakFinding> = BTreeMap::new();
    let mut reason = None;
    while st.pc < program.len() {
        if st.cycle == opts.max_steps {
            reason = Some(format!("step limit of {} reached", opts.max_steps));
            break;
        }
        match sym_step(&mut st, program, word_width, opts) {
            Ok(fs) => {
                for f in fs {
                    let key = (f.index, f.kind, f.location.clone());
                    match merged.get_mut(&key) {
                        Some(m) => {
                            for d in f.hd_set {
                                if !m.hd_set.contains(&d) {
                                    m.hd_set.push(d);
                                }
                            }
                            for w in f.hw_set {
                                if !m.hw_set.contains(&w) {
                                    m.hw_set.push(w);
                                }
                            }
                            m.hd_set.sort_unstable();
                            m.hw_set.sort_unstable();
                        }
                        None => {
                            merged.insert(key, f);
                        }
                    }
                }
            }
            Err(e) => {
                reason = Some(e.to_string());
                break;
            }
        }
    }
    let findings: Vec<LeakFinding> = merged.into_values().collect();
    let verdict = if !findings.is_empty() {
        Verdict::Leaky
    } else if reason.is_some() {
        Verdict::Inconclusive
    } else {
        Verdict::Balanced
    };
    BalanceReport {
        verdict,
        reason,
        findings,
        cycles: st.cycle,
        max_set_size: st.max_set_size,
    }
}

/// Verifies a program from its own directives.
pub fn verify_program(program: &LinkedProgram, cfg: &MachineConfig, opts: &VerifyOptions) -> BalanceReport {
    verify(program, SymbolicState::for_program(program, cfg), cfg.word_width, opts)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CrossValidation {
    pub pairs: usize,
    /// First pair and cycle whose leakage differed.
    pub first_difference: Option<(usize, u64)>,
}

impl CrossValidation {
    pub fn passed(&self) -> bool {
        self.first_difference.is_none()
    }
}

/// Runs random pairs of sensitive inputs concretely and compares their
/// per-cycle uniform-weight leakage, buses included.
pub fn cross_validate(
    program: &LinkedProgram,
    cfg: &MachineConfig,
    n_pairs: usize,
    seed: u64,
    max_steps: u64,
) -> Result<CrossValidation, crate::machine::MachineError> {
    let machine = Machine::new(*cfg);
    let enc = program.encoding.unwrap_or(Encoding::PLAIN);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = vec![1.0; cfg.word_width as usize];
    let trace = |rng: &mut ChaCha8Rng| {
        let mut st = machine.initial_state();
        for l in &program.sensitive {
            st.set(*l, enc.encode(rng.random()));
        }
        machine
            .run(program, st, max_steps)
            .map(|r| cycle_leakage(&r.events, r.instruction_count as usize, &weights, true))
    };
    if program.sensitive.is_empty() {
        return Ok(CrossValidation {
            pairs: n_pairs,
            first_difference: None,
        });
    }
    for pair in 0..n_pairs {
        let a = trace(&mut rng)?;
        let b = trace(&mut rng)?;
        let diff = a
            .iter()
            .zip(&b)
            .position(|(x, y)| x != y)
            .or_else(|| (a.len() != b.len()).then(|| a.len().min(b.len())));
        if let Some(c) = diff {
            return Ok(CrossValidation {
                pairs: pair + 1,
                first_difference: Some((pair, c as u64)),
            });
        }
    }
    Ok(CrossValidation {
        pairs: n_pairs,
        first_difference: None,
    })
}
