mod common;

use dpl_core::asm::{parse, Loc, Opcode};
use dpl_core::machine::{cycle_leakage, weighted_popcount, EventKind, Machine, MachineConfig};
use proptest::prelude::*;

proptest! {
    #[test]
    fn runs_are_deterministic_and_ordered(body in common::body(), v in 0u32..16) {
        let p = parse(&common::source(&body)).unwrap().resolve().unwrap();
        let m = Machine::new(MachineConfig::default());
        let mut init = m.initial_state();
        for i in 0..4 {
            init.set(Loc::Reg(4 + i), v >> i & 1);
        }
        let a = m.run(&p, init.clone(), 1000).unwrap();
        let b = m.run(&p, init, 1000).unwrap();
        prop_assert_eq!(&a.events, &b.events);
        prop_assert_eq!(a.final_state, b.final_state);
        prop_assert!(a.events.windows(2).all(|w| w[0].cycle <= w[1].cycle));
        // one update per writing instruction
        let updates = a.events.iter().filter(|e| !e.kind.is_bus()).count();
        prop_assert_eq!(updates as u64, a.instruction_count);
    }

    #[test]
    fn hd_is_the_sum_of_bit_flips(old in 0u32..256, new in 0u32..256) {
        let p = parse("mov r1 r2\n").unwrap().resolve().unwrap();
        let m = Machine::new(MachineConfig::default());
        let mut st = m.initial_state();
        st.set(Loc::Reg(1), old);
        st.set(Loc::Reg(2), new);
        let r = m.run(&p, st, 10).unwrap();
        let e = r.events[0];
        prop_assert_eq!(e.kind, EventKind::RegUpdate);
        let per_bit: u32 = (0..8).map(|b| (e.flips() >> b) & 1).sum();
        prop_assert_eq!(e.hd(), per_bit);
        prop_assert_eq!(cycle_leakage(&r.events, 1, &[1.0; 8], true)[0], e.hd() as f64);
        prop_assert_eq!(weighted_popcount(e.flips(), &[1.0; 8]), e.hd() as f64);
    }
}

#[test]
fn control_flow_emits_no_updates() {
    let p = parse("nop\njmp skip\nnop\nskip: beq r1 #1 skip\nbne r1 #0 skip\n").unwrap().resolve().unwrap();
    let r = Machine::new(MachineConfig::default()).run(&p, Machine::new(MachineConfig::default()).initial_state(), 10).unwrap();
    assert!(r.events.is_empty());
    assert_eq!(r.instruction_count, 4);
}

#[test]
fn every_opcode_runs() {
    let src = "nop\nnot r1 r2\nmov r2 #5\nand r3 r2 #4\norr r3 r3 #1\nxor r3 r3 r2\nlsl r4 r2 #1\nlsr r4 r4 #2\nadd r5 r2 r2\nmul r5 r5 r2\nbeq r5 #0 end\nbne r5 #0 end\njmp end\nend: nop\n";
    let p = parse(src).unwrap();
    assert_eq!(p.instructions().map(|i| i.opcode()).collect::<std::collections::HashSet<_>>().len(), Opcode::ALL.len());
    let m = Machine::new(MachineConfig::default());
    let r = m.run(&p.resolve().unwrap(), m.initial_state(), 100).unwrap();
    let s = &r.final_state;
    assert_eq!(s.get(Loc::Reg(1)), 0xFF);
    assert_eq!(s.get(Loc::Reg(3)), 0);
    assert_eq!(s.get(Loc::Reg(4)), 2);
    assert_eq!(s.get(Loc::Reg(5)), 50);
}
