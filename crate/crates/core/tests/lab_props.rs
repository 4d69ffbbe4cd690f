use std::sync::OnceLock;

use dpl_core::asm::{parse, LinkedProgram};
use dpl_core::corpus::{self, build_corpus};
use dpl_core::lab::*;
use dpl_core::machine::{Machine, MachineConfig};
use dpl_core::transform::{transform, DplConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const KEY: u128 = 0x0123_4567_89AB_CDEF_0F1E;

struct Corpora {
    plain: LinkedProgram,
    dpl: LinkedProgram,
    plain_narrow: std::ops::Range<usize>,
    dpl_narrow: std::ops::Range<usize>,
}

fn corpora() -> &'static Corpora {
    static C: OnceLock<Corpora> = OnceLock::new();
    C.get_or_init(|| {
        let mc = MachineConfig::default();
        let e = &build_corpus()[0];
        let cfg = DplConfig {
            lut_base: corpus::LUT_BASE,
            ..DplConfig::default()
        };
        let plain = e.program.resolve().unwrap();
        let dpl = transform(&e.program, &cfg).unwrap().0.resolve().unwrap();
        Corpora {
            plain_narrow: corpus::windows(&plain, &mc).unwrap().narrow,
            dpl_narrow: corpus::windows(&dpl, &mc).unwrap().narrow,
            plain,
            dpl,
        }
    })
}

fn campaign(p: &LinkedProgram, model: LeakModel, window: std::ops::Range<usize>) -> Campaign<'_> {
    Campaign {
        program: p,
        machine: MachineConfig::default(),
        layout: InputLayout::for_program(p, 64),
        key: KEY,
        model,
        target: MonobitTarget::present(0),
        window,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn nicv_is_bounded(k in 2usize..17, rows in prop::collection::vec((0usize..16, prop::collection::vec(-1e3f64..1e3, 4)), 1..60)) {
        let mut s = ClassStats::new(k, 4);
        for (c, r) in &rows {
            s.add(c % k, r);
        }
        if let Ok(v) = s.nicv() {
            prop_assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
        }
        if let Some(c) = s.correlation(|c| (c % 2) as f64) {
            prop_assert!(c.iter().all(|x| (-1.0..=1.0).contains(x)));
        }
    }
}

#[test]
fn noiseless_uniform_traces_are_summed_distances() {
    let p = parse(";@sensitive r1..r8\nmov r10 r1\nxor r11 r2 r3\nmov @40 r11\nmov r12 !r1,40\n").unwrap().resolve().unwrap();
    let mc = MachineConfig::default();
    let ts = synth_traces(&p, &mc, InputLayout::for_program(&p, 8), 0, 30, &LeakModel::uniform(8, 0.0), 3, None).unwrap();
    let m = Machine::new(mc);
    for r in 0..ts.n_runs() {
        let mut st = m.initial_state();
        for i in 0..8 {
            st.set(p.sensitive[i], (ts.plaintexts[r] >> i & 1) as u32);
        }
        let run = m.run(&p, st, 100).unwrap();
        let mut want = vec![0.0f32; ts.n_cycles];
        for e in &run.events {
            want[e.cycle as usize] += e.hd() as f32;
        }
        assert_eq!(ts.row(r), &want[..]);
    }
}

#[test]
fn seeds_reproduce_traces_and_attacks() {
    let c = corpora();
    let model = LeakModel::uniform(8, 2.0);
    let a = synth_traces(&c.plain, &MachineConfig::default(), InputLayout::for_program(&c.plain, 64), KEY, 40, &model, 11, Some(c.plain_narrow.clone())).unwrap();
    let b = synth_traces(&c.plain, &MachineConfig::default(), InputLayout::for_program(&c.plain, 64), KEY, 40, &model, 11, Some(c.plain_narrow.clone())).unwrap();
    assert_eq!(a, b);
    let t = MonobitTarget::present(0);
    assert_eq!(cpa_monobit(&a, &t, c.plain_narrow.clone()).unwrap(), cpa_monobit(&b, &t, c.plain_narrow.clone()).unwrap());
    let camp = campaign(&c.plain, model, c.plain_narrow.clone());
    let mut r1 = ChaCha8Rng::seed_from_u64(5);
    let mut r2 = ChaCha8Rng::seed_from_u64(5);
    assert_eq!(run_attack(&camp, 50, &mut r1).unwrap(), run_attack(&camp, 50, &mut r2).unwrap());
    assert_eq!(success_rate(&camp, &[20, 40], 10, 1).unwrap(), success_rate(&camp, &[20, 40], 10, 1).unwrap());
}

#[test]
fn balanced_code_has_no_signal() {
    let c = corpora();
    let ts = synth_traces(&c.dpl, &MachineConfig::default(), InputLayout::for_program(&c.dpl, 64), KEY, 64, &LeakModel::uniform(8, 0.0), 4, Some(c.dpl_narrow.clone())).unwrap();
    let t = MonobitTarget::present(0);
    let v = nicv(&ts, 16, |pt| t.class(pt)).unwrap();
    assert!(v.iter().all(|x| *x == 0.0));
    assert!(snr(&ts, 1.0).iter().all(|x| *x == 0.0));
    let r = cpa_monobit(&ts, &t, c.dpl_narrow.clone()).unwrap();
    assert_eq!(r.best_guess, None);
    assert!(!r.success);
}

#[test]
fn unprotected_code_leaks_the_key_without_noise() {
    let c = corpora();
    let ts = synth_traces(&c.plain, &MachineConfig::default(), InputLayout::for_program(&c.plain, 64), KEY, 200, &LeakModel::uniform(8, 0.0), 4, Some(c.plain_narrow.clone())).unwrap();
    let t = MonobitTarget::present(0);
    let r = cpa_monobit(&ts, &t, c.plain_narrow.clone()).unwrap();
    assert_eq!(r.true_guess, corpus::first_round_key_nibble(KEY, 0));
    assert!(r.success);
    assert!((r.peak - 1.0).abs() < 1e-9);
    assert_eq!(r.correlations.len(), 16);
}

#[test]
fn success_grows_with_rail_imbalance() {
    let e = &build_corpus()[0];
    let cfg = DplConfig {
        lut_base: corpus::LUT_BASE,
        ..DplConfig::default()
    };
    let p = transform(&e.program, &cfg).unwrap().0.resolve().unwrap();
    let window = corpora().dpl_narrow.clone();
    let mut rates = Vec::new();
    for delta in [0.0, 1.0, 3.0] {
        let mut w = vec![1.0; 8];
        w[0] += delta;
        let c = campaign(&p, LeakModel::with_weights(w, 4.0), window.clone());
        rates.push(success_rate(&c, &[150], 50, 9).unwrap()[0].success_rate);
    }
    assert!(rates.windows(2).all(|w| w[0] <= w[1]), "{rates:?}");
    assert!(rates[2] > rates[0], "{rates:?}");
}

#[test]
fn profile_prefers_matched_bits() {
    let e = &build_corpus()[0];
    let mc = MachineConfig::default();
    let window = corpus::windows(&e.program.resolve().unwrap(), &mc).unwrap().round;
    let uniform = profile_bits(&e.program, &mc, 64, KEY, &LeakModel::uniform(8, 2.0), 200, 3, Some(window.clone()), 1e-9).unwrap();
    assert_eq!(uniform.pair, (1, 0));
    let spread = uniform.scores.iter().cloned().fold(f64::NAN, f64::max) - uniform.scores.iter().cloned().fold(f64::NAN, f64::min);
    assert!(spread < 1e-12);
    let mut w = vec![1.0; 8];
    w[0] = 3.0;
    let skewed = profile_bits(&e.program, &mc, 64, KEY, &LeakModel::with_weights(w, 2.0), 200, 3, Some(window), 1e-9).unwrap();
    assert_eq!(skewed.pair, (2, 1));
    assert_eq!(*skewed.ranking.last().unwrap(), 0);
}

#[test]
fn short_or_variable_programs_are_rejected() {
    let p = parse(";@sensitive r1\nbeq r1 #1 end\nnop\nend: nop\n").unwrap().resolve().unwrap();
    let r = synth_traces(&p, &MachineConfig::default(), InputLayout::for_program(&p, 1), 0, 20, &LeakModel::uniform(8, 0.0), 1, None);
    assert!(matches!(r, Err(LabError::NotConstantTime(..))));
    let q = parse("nop\n").unwrap().resolve().unwrap();
    let r = synth_traces(&q, &MachineConfig::default(), InputLayout::for_program(&q, 0), 0, 1, &LeakModel::uniform(8, 0.0), 1, Some(0..5));
    assert!(matches!(r, Err(LabError::ShortProgram { .. })));
}
