//! Concrete interpreter with Hamming-model event recording.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asm::{word_mask, IndBase, Instruction, LinkedProgram, Loc, Operand, UnaryOp, Word};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineConfig {
    pub word_width: u32,
    pub registers: usize,
    pub memory: usize,
}

impl Default for MachineConfig {
    fn default() -> Self {
        MachineConfig {
            word_width: 8,
            registers: 32,
            memory: 1024,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MachineState {
    pub registers: Vec<Word>,
    pub memory: Vec<Word>,
    pub pc: usize,
    pub cycle: u64,
}

impl MachineState {
    /// All-zero state.
    pub fn new(cfg: &MachineConfig) -> MachineState {
        MachineState {
            registers: vec![0; cfg.registers],
            memory: vec![0; cfg.memory],
            pc: 0,
            cycle: 0,
        }
    }

    pub fn get(&self, loc: Loc) -> Word {
        match loc {
            Loc::Reg(r) => self.registers[r as usize],
            Loc::Mem(a) => self.memory[a as usize],
        }
    }

    pub fn set(&mut self, loc: Loc, value: Word) {
        match loc {
            Loc::Reg(r) => self.registers[r as usize] = value,
            Loc::Mem(a) => self.memory[a as usize] = value,
        }
    }

    pub fn is_halted(&self, program: &LinkedProgram) -> bool {
        self.pc >= program.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    RegUpdate,
    MemUpdate,
    AddrBus,
    DataBus,
}

impl EventKind {
    pub fn is_bus(self) -> bool {
        matches!(self, EventKind::AddrBus | EventKind::DataBus)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::RegUpdate => "reg_update",
            EventKind::MemUpdate => "mem_update",
            EventKind::AddrBus => "addr_bus",
            EventKind::DataBus => "data_bus",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One observable update. Buses are precharged to zero, so for bus events
/// `old` is always 0 and `new` is the transferred address or word.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LeakageEvent {
    pub cycle: u64,
    pub kind: EventKind,
    /// Updated register or cell; for bus events, the accessed cell.
    pub location: Loc,
    pub old: Word,
    pub new: Word,
}

impl LeakageEvent {
    pub fn hd(&self) -> u32 {
        (self.old ^ self.new).count_ones()
    }

    pub fn hw(&self) -> u32 {
        self.new.count_ones()
    }

    pub fn flips(&self) -> Word {
        self.old ^ self.new
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MachineError {
    #[error("pc {pc}: register r{reg} out of range")]
    RegisterOutOfRange { pc: usize, reg: u8 },
    #[error("pc {pc}: memory address {address} out of range")]
    MemoryOutOfRange { pc: usize, address: i64 },
    #[error("step limit of {0} exceeded")]
    StepLimit(u64),
    #[error("machine is halted")]
    Halted,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub final_state: MachineState,
    pub events: Vec<LeakageEvent>,
    pub instruction_count: u64,
}

impl RunResult {
    pub fn cycle_leakage(&self, weights: &[f64], include_bus: bool) -> Vec<f64> {
        cycle_leakage(&self.events, self.instruction_count as usize, weights, include_bus)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Machine {
    cfg: MachineConfig,
    mask: Word,
}

impl Machine {
    pub fn new(cfg: MachineConfig) -> Machine {
        Machine {
            cfg,
            mask: word_mask(cfg.word_width),
        }
    }

    pub fn config(&self) -> &MachineConfig {
        &self.cfg
    }

    pub fn initial_state(&self) -> MachineState {
        MachineState::new(&self.cfg)
    }

    fn reg(&self, st: &MachineState, r: u8, pc: usize) -> Result<Word, MachineError> {
        st.registers
            .get(r as usize)
            .copied()
            .ok_or(MachineError::RegisterOutOfRange { pc, reg: r })
    }

    fn address(&self, st: &MachineState, op: &Operand, pc: usize) -> Result<Option<u32>, MachineError> {
        let a = match op {
            Operand::Mem(a) => *a as i64,
            Operand::Ind { base, offset } => {
                let b = match base {
                    IndBase::Reg(r) => self.reg(st, *r, pc)?,
                    IndBase::Imm(v) => *v & self.mask,
                };
                b as i64 + *offset as i64
            }
            _ => return Ok(None),
        };
        if a < 0 || a as usize >= st.memory.len() {
            return Err(MachineError::MemoryOutOfRange { pc, address: a });
        }
        Ok(Some(a as u32))
    }

    fn read(
        &self,
        st: &MachineState,
        op: &Operand,
        pc: usize,
        sink: &mut impl FnMut(LeakageEvent),
    ) -> Result<Word, MachineError> {
        match op {
            Operand::Reg(r) => self.reg(st, *r, pc),
            Operand::Imm(v) => Ok(*v & self.mask),
            _ => {
                let a = self.address(st, op, pc)?.expect("memory operand");
                let v = st.memory[a as usize];
                let cycle = st.cycle;
                sink(bus(cycle, EventKind::AddrBus, a, a));
                sink(bus(cycle, EventKind::DataBus, a, v));
                Ok(v)
            }
        }
    }

    fn write(
        &self,
        st: &mut MachineState,
        op: &Operand,
        value: Word,
        pc: usize,
        sink: &mut impl FnMut(LeakageEvent),
    ) -> Result<(), MachineError> {
        let value = value & self.mask;
        let cycle = st.cycle;
        match op {
            Operand::Reg(r) => {
                let old = self.reg(st, *r, pc)?;
                st.registers[*r as usize] = value;
                sink(LeakageEvent {
                    cycle,
                    kind: EventKind::RegUpdate,
                    location: Loc::Reg(*r),
                    old,
                    new: value,
                });
            }
            Operand::Imm(_) => unreachable!("parser rejects immediate destinations"),
            _ => {
                let a = self.address(st, op, pc)?.expect("memory operand");
                let old = st.memory[a as usize];
                st.memory[a as usize] = value;
                sink(bus(cycle, EventKind::AddrBus, a, a));
                sink(bus(cycle, EventKind::DataBus, a, value));
                sink(LeakageEvent {
                    cycle,
                    kind: EventKind::MemUpdate,
                    location: Loc::Mem(a),
                    old,
                    new: value,
                });
            }
        }
        Ok(())
    }

    /// Executes exactly one instruction and advances the cycle counter.
    pub fn step(
        &self,
        st: &mut MachineState,
        program: &LinkedProgram,
        sink: &mut impl FnMut(LeakageEvent),
    ) -> Result<(), MachineError> {
        let pc = st.pc;
        let inst = program.code.get(pc).ok_or(MachineError::Halted)?;
        let mut next = pc + 1;
        match inst {
            Instruction::Nop => {}
            Instruction::Jmp(t) => next = *t,
            Instruction::Unary { op, dst, src } => {
                let v = self.read(st, src, pc, sink)?;
                let v = match op {
                    UnaryOp::Mov => v,
                    UnaryOp::Not => !v & self.mask,
                };
                self.write(st, dst, v, pc, sink)?;
            }
            Instruction::Binary { op, dst, lhs, rhs } => {
                let a = self.read(st, lhs, pc, sink)?;
                let b = self.read(st, rhs, pc, sink)?;
                self.write(st, dst, op.apply(a, b, self.mask), pc, sink)?;
            }
            Instruction::Branch {
                cond,
                lhs,
                rhs,
                target,
            } => {
                let a = self.read(st, lhs, pc, sink)?;
                let b = self.read(st, rhs, pc, sink)?;
                if cond.holds(a, b) {
                    next = *target;
                }
            }
        }
        st.pc = next;
        st.cycle += 1;
        Ok(())
    }

    /// Runs to halt, streaming events. Returns the instruction count.
    pub fn run_with(
        &self,
        program: &LinkedProgram,
        st: &mut MachineState,
        max_steps: u64,
        sink: &mut impl FnMut(LeakageEvent),
    ) -> Result<u64, MachineError> {
        let mut steps = 0u64;
        while st.pc < program.len() {
            if steps == max_steps {
                return Err(MachineError::StepLimit(max_steps));
            }
            self.step(st, program, sink)?;
            steps += 1;
        }
        Ok(steps)
    }

    pub fn run(
        &self,
        program: &LinkedProgram,
        init: MachineState,
        max_steps: u64,
    ) -> Result<RunResult, MachineError> {
        let mut st = init;
        let mut events = Vec::new();
        let n = self.run_with(program, &mut st, max_steps, &mut |e| events.push(e))?;
        Ok(RunResult {
            final_state: st,
            events,
            instruction_count: n,
        })
    }
}

fn bus(cycle: u64, kind: EventKind, address: u32, value: Word) -> LeakageEvent {
    LeakageEvent {
        cycle,
        kind,
        location: Loc::Mem(address),
        old: 0,
        new: value,
    }
}

/// Weighted count of set bits; bits beyond `weights` weigh 1.
pub fn weighted_popcount(mut x: Word, weights: &[f64]) -> f64 {
    let mut s = 0.0;
    while x != 0 {
        let i = x.trailing_zeros() as usize;
        s += weights.get(i).copied().unwrap_or(1.0);
        x &= x - 1;
    }
    s
}

/// Per-cycle leakage: weighted flipped bits of every update event of the
/// cycle, plus bus transfers when `include_bus`.
pub fn cycle_leakage(
    events: &[LeakageEvent],
    n_cycles: usize,
    weights: &[f64],
    include_bus: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; n_cycles];
    for e in events {
        if e.kind.is_bus() && !include_bus {
            continue;
        }
        let c = e.cycle as usize;
        if c >= out.len() {
            out.resize(c + 1, 0.0);
        }
        out[c] += weighted_popcount(e.flips(), weights);
    }
    out
}

#[derive(Serialize)]
struct EventRow {
    cycle: u64,
    kind: &'static str,
    location: String,
    hd: u32,
    hw: u32,
}

/// Writes `cycle,kind,location,hd,hw` rows.
pub fn write_events_csv<W: Write>(events: &[LeakageEvent], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for e in events {
        w.serialize(EventRow {
            cycle: e.cycle,
            kind: e.kind.as_str(),
            location: e.location.to_string(),
            hd: e.hd(),
            hw: e.hw(),
        })?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::parse;

    fn link(src: &str) -> LinkedProgram {
        parse(src).unwrap().resolve().unwrap()
    }

    fn machine() -> Machine {
        Machine::new(MachineConfig::default())
    }

    #[test]
    fn orr_update_flips_one_bit() {
        let p = link("orr r1 r1 r2");
        let mut st = machine().initial_state();
        st.registers[1] = 0b1000;
        st.registers[2] = 0b0010;
        let r = machine().run(&p, st, 10).unwrap();
        assert_eq!(r.final_state.registers[1], 0b1010);
        assert_eq!(r.events.len(), 1);
        assert_eq!(r.events[0].kind, EventKind::RegUpdate);
        assert_eq!(r.events[0].hd(), 1);
    }

    #[test]
    fn zero_precharge_of_zero() {
        let p = link("mov r1 r0");
        let r = machine().run(&p, machine().initial_state(), 10).unwrap();
        assert_eq!(r.final_state.registers[1], 0);
        assert_eq!(r.events[0].hd(), 0);
    }

    #[test]
    fn indexed_load_events() {
        let p = link("mov r3 !r1,16");
        let mut st = machine().initial_state();
        st.registers[1] = 10;
        st.registers[3] = 0b111;
        st.memory[26] = 2;
        let r = machine().run(&p, st, 10).unwrap();
        assert_eq!(r.final_state.registers[3], 2);
        let addr = r.events.iter().find(|e| e.kind == EventKind::AddrBus).unwrap();
        assert_eq!(addr.hw(), 3);
        assert_eq!(addr.hd(), addr.hw());
        let data = r.events.iter().find(|e| e.kind == EventKind::DataBus).unwrap();
        assert_eq!(data.hw(), 1);
        let upd = r.events.iter().find(|e| e.kind == EventKind::RegUpdate).unwrap();
        assert_eq!(upd.hd(), (0b111u32 ^ 2).count_ones());
    }

    #[test]
    fn empty_program_has_no_events() {
        let r = machine().run(&link(""), machine().initial_state(), 10).unwrap();
        assert!(r.events.is_empty());
        assert_eq!(r.instruction_count, 0);
    }

    #[test]
    fn control_flow_and_step_limit() {
        let p = link("mov r1 #3\nloop: add r2 r2 #1\nbne r2 r1 loop\nnop\n");
        let r = machine().run(&p, machine().initial_state(), 100).unwrap();
        assert_eq!(r.final_state.registers[2], 3);
        assert_eq!(r.instruction_count, 1 + 3 * 2 + 1);
        let spin = link("a: jmp a");
        assert_eq!(
            machine().run(&spin, machine().initial_state(), 50).unwrap_err(),
            MachineError::StepLimit(50)
        );
    }

    #[test]
    fn out_of_range_access() {
        let p = link("mov r1 !r2,1020");
        let mut st = machine().initial_state();
        st.registers[2] = 8;
        assert!(matches!(
            machine().run(&p, st, 10),
            Err(MachineError::MemoryOutOfRange { address: 1028, .. })
        ));
    }

    #[test]
    fn not_is_complement_within_width() {
        let p = link("not r1 r2");
        let mut st = machine().initial_state();
        st.registers[2] = 0b1010_0001;
        let r = machine().run(&p, st, 10).unwrap();
        assert_eq!(r.final_state.registers[1], 0b0101_1110);
    }

    #[test]
    fn weighted_leakage() {
        let e = LeakageEvent {
            cycle: 0,
            kind: EventKind::RegUpdate,
            location: Loc::Reg(1),
            old: 0,
            new: 0b110,
        };
        assert_eq!(cycle_leakage(&[e], 1, &[1.0; 8], false), vec![2.0]);
        let w = [3.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        assert_eq!(cycle_leakage(&[e], 1, &w, false), vec![2.0]);
        let b = LeakageEvent {
            kind: EventKind::DataBus,
            ..e
        };
        assert_eq!(cycle_leakage(&[e, b], 2, &w, false), vec![2.0, 0.0]);
        assert_eq!(cycle_leakage(&[e, b], 2, &w, true), vec![4.0, 0.0]);
    }

    #[test]
    fn nop_jmp_untaken_branch_emit_no_updates() {
        let p = link("nop\njmp #2\nbeq r1 #1 #0\n");
        let r = machine().run(&p, machine().initial_state(), 10).unwrap();
        assert!(r.events.is_empty());
        assert_eq!(r.instruction_count, 3);
    }

    #[test]
    fn memory_to_memory_move() {
        let p = link("mov @5 @6");
        let mut st = machine().initial_state();
        st.memory[6] = 3;
        let r = machine().run(&p, st, 10).unwrap();
        let kinds: Vec<_> = r.events.iter().map(|e| e.kind).collect();
        assert_eq!(
            kinds,
            [
                EventKind::AddrBus,
                EventKind::DataBus,
                EventKind::AddrBus,
                EventKind::DataBus,
                EventKind::MemUpdate
            ]
        );
    }

    #[test]
    fn events_csv() {
        let p = link("mov @5 #3");
        let r = machine().run(&p, machine().initial_state(), 10).unwrap();
        let mut buf = Vec::new();
        write_events_csv(&r.events, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "cycle,kind,location,hd,hw\n0,addr_bus,@5,2,2\n0,data_bus,@5,2,2\n0,mem_update,@5,2,2\n"
        );
    }
}
