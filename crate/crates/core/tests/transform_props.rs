mod common;

use dpl_core::asm::{parse, BinaryOp, LinkedProgram, Loc, Operand, Program};
use dpl_core::equivalence::{check, u128_bits, DplStateMap, InputSpec};
use dpl_core::machine::{Machine, MachineConfig};
use dpl_core::transform::{gen_luts, layouts, transform, DplConfig, LUT_OPS};
use proptest::prelude::*;

fn config(bf: u32, bt: u32, compact: bool) -> DplConfig {
    DplConfig {
        lut_base: 0x100,
        compact,
        ..DplConfig::default()
    }
    .with_rails(bf, bt)
}

fn all_configs() -> Vec<DplConfig> {
    let mut v = Vec::new();
    for (f, t) in layouts(8) {
        for (a, b) in [(f, t), (t, f)] {
            v.push(config(a, b, false));
            v.push(config(a, b, true));
        }
    }
    v
}

fn body_only(p: &Program) -> Vec<String> {
    p.print()
        .lines()
        .filter(|l| !l.trim_start().starts_with(';') && !l.contains(";@prologue") && !l.contains(";@public"))
        .map(String::from)
        .collect()
}

#[test]
fn encodings_are_one_hot_and_complementary() {
    for cfg in all_configs() {
        let (z, o) = (cfg.encode(false), cfg.encode(true));
        assert_eq!(z ^ o, (1 << cfg.bit_f) | (1 << cfg.bit_t));
        assert_eq!((z.count_ones(), o.count_ones()), (1, 1));
        assert_eq!(z ^ o, cfg.rail_mask());
    }
}

#[test]
fn tables_hold_the_operation_on_valid_pairs() {
    for cfg in all_configs() {
        let (luts, _) = gen_luts(&cfg, &LUT_OPS).unwrap();
        assert_eq!(luts.len(), 3);
        for (lut, op) in luts.iter().zip(LUT_OPS) {
            let valid: Vec<_> = lut.entries.values().filter(|v| **v != 0).copied().collect();
            assert_eq!(valid.len(), 4, "{cfg:?} {}", lut.op);
            assert_eq!(lut.entries.len(), 16);
            let mut want: Vec<_> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                .iter()
                .map(|(a, b)| cfg.encode(op.apply(*a, *b, 1) == 1))
                .collect();
            let mut got = valid.clone();
            want.sort();
            got.sort();
            assert_eq!(got, want);
        }
    }
}

#[test]
fn indexed_loads_never_carry_into_the_base() {
    for cfg in all_configs() {
        let p = parse(&common::source(&["and r8 r4 r5".into(), "orr r9 r4 r5".into(), "xor r10 r4 r5".into()])).unwrap();
        let (t, r) = transform(&p, &cfg).unwrap();
        let lo = cfg.pattern_lo;
        let mut seen = 0;
        for inst in t.instructions() {
            for op in inst.operands() {
                if let Operand::Ind { offset, .. } = op {
                    assert_eq!(offset as u32 & (0xF << lo), 0, "{cfg:?}");
                    seen += 1;
                }
            }
        }
        assert_eq!(seen, 3);
        assert_eq!(r.expanded_count, 3);
    }
}

#[test]
fn every_layout_computes_each_operation() {
    let mc = MachineConfig::default();
    for cfg in all_configs() {
        for op in ["and", "orr", "xor"] {
            let src = format!(";@sensitive r4 r5\n;@output r8 r4\n{op} r8 r4 r5\nnot r4 r4\n");
            let p = parse(&src).unwrap();
            let (t, _) = transform(&p, &cfg).unwrap();
            let (o, t) = (p.resolve().unwrap(), t.resolve().unwrap());
            let v = check(&o, &t, &DplStateMap::for_programs(&o, &t), &InputSpec::Exhaustive, 0, &mc, 1000);
            assert!(v.passed(), "{cfg:?} {op}: {v:?}");
        }
    }
}

fn run_plain(p: &LinkedProgram, regs: &[u32; 14]) -> [u32; 14] {
    let m = Machine::new(MachineConfig::default());
    let mut st = m.initial_state();
    for (r, v) in regs.iter().enumerate().skip(4) {
        st.set(Loc::Reg(r as u8), *v);
    }
    let r = m.run(p, st, 10_000).unwrap();
    std::array::from_fn(|i| if i >= 4 { r.final_state.get(Loc::Reg(i as u8)) & 1 } else { 0 })
}

fn run_dpl(p: &LinkedProgram, cfg: &DplConfig, regs: &[u32; 14], flip: Option<(usize, u8, u32)>) -> [Option<bool>; 14] {
    let m = Machine::new(MachineConfig::default());
    let mut st = m.initial_state();
    for (r, v) in regs.iter().enumerate().skip(4) {
        st.set(Loc::Reg(r as u8), cfg.encode(*v == 1));
    }
    let mut step = 0;
    while st.pc < p.len() {
        if let Some((at, reg, bit)) = flip {
            if step == at {
                let l = Loc::Reg(reg);
                st.set(l, st.get(l) ^ (1 << bit));
            }
        }
        m.step(&mut st, p, &mut |_| {}).unwrap();
        step += 1;
    }
    let enc = cfg.encoding();
    std::array::from_fn(|i| if i >= 4 { enc.decode(st.get(Loc::Reg(i as u8))) } else { Some(false) })
}

fn inputs(v: u16) -> [u32; 14] {
    std::array::from_fn(|i| if i >= 4 { (v >> (i - 4) & 1) as u32 } else { 0 })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_programs_are_equivalent(body in common::body(), k in 0usize..52) {
        let cfg = all_configs()[k];
        let p = parse(&common::source(&body)).unwrap();
        let (t, _) = transform(&p, &cfg).unwrap();
        let (o, t) = (p.resolve().unwrap(), t.resolve().unwrap());
        let v = check(&o, &t, &DplStateMap::for_programs(&o, &t), &InputSpec::Exhaustive, 0, &MachineConfig::default(), 100_000);
        prop_assert!(v.passed(), "{:?}", v.failures);
        prop_assert_eq!(v.checked, 16);
    }

    #[test]
    fn transform_distributes_over_concatenation(a in common::body(), b in common::body()) {
        let cfg = DplConfig { lut_base: 0x100, ..DplConfig::default() };
        let joined: Vec<String> = a.iter().chain(&b).cloned().collect();
        let t = |lines: &[String]| transform(&parse(&common::source(lines)).unwrap(), &cfg).unwrap().0;
        let mut parts = body_only(&t(&a));
        parts.extend(body_only(&t(&b)));
        prop_assert_eq!(body_only(&t(&joined)), parts);
    }

    #[test]
    fn correctness_chains_through_intermediate_states(a in common::body(), b in common::body(), v in 0u16..1024) {
        let cfg = DplConfig { lut_base: 0x100, ..DplConfig::default() };
        let link = |lines: &[String]| {
            let p = parse(&common::source(lines)).unwrap();
            (p.resolve().unwrap(), transform(&p, &cfg).unwrap().0.resolve().unwrap())
        };
        let joined: Vec<String> = a.iter().chain(&b).cloned().collect();
        let ((pa, ta), (pb, tb), (pc, tc)) = (link(&a), link(&b), link(&joined));
        let x = inputs(v);
        let y = run_plain(&pa, &x);
        let z = run_plain(&pb, &y);
        let expect = |s: &[u32; 14]| -> [Option<bool>; 14] { std::array::from_fn(|i| Some(i >= 4 && s[i] == 1)) };
        let step_a = run_dpl(&ta, &cfg, &x, None) == expect(&y);
        let step_b = run_dpl(&tb, &cfg, &y, None) == expect(&z);
        let whole = run_dpl(&tc, &cfg, &x, None) == expect(&z) && run_plain(&pc, &x) == z;
        prop_assert_eq!(whole, step_a && step_b);
        prop_assert!(whole);
    }

    #[test]
    fn single_rail_faults_poison_or_vanish(body in common::body(), v in 0u16..1024, at in 0usize..400, reg in 3u8..14, rail in prop::bool::ANY) {
        let cfg = DplConfig { lut_base: 0x100, ..DplConfig::default() };
        let p = parse(&common::source(&body)).unwrap();
        let t = transform(&p, &cfg).unwrap().0.resolve().unwrap();
        let o = p.resolve().unwrap();
        let x = inputs(v);
        let clean = run_plain(&o, &x);
        let bit = if rail { cfg.bit_f } else { cfg.bit_t };
        let got = run_dpl(&t, &cfg, &x, Some((at % t.len(), reg, bit)));
        let poisoned = (8..14).any(|i| got[i].is_none());
        let unchanged = (8..14).all(|i| got[i] == Some(clean[i] == 1));
        prop_assert!(poisoned || unchanged, "{:?} vs {:?}", got, clean);
    }
}

#[test]
fn lut_sets_follow_the_operations_used() {
    let cfg = DplConfig { lut_base: 0x100, ..DplConfig::default() };
    let p = parse(";@sensitive r4 r5\nxor r8 r4 r5\n").unwrap();
    let (_, r) = transform(&p, &cfg).unwrap();
    assert_eq!(r.luts.iter().map(|l| l.op).collect::<Vec<_>>(), ["xor"]);
    assert_eq!(r.lut_bytes, 16);
    let (luts, _) = gen_luts(&cfg, &[BinaryOp::And]).unwrap();
    assert_eq!(luts[0].base, 0x100);
    assert!(u128_bits(5, 3)[0]);
}
