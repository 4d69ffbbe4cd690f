//! Concrete check that a transformed program computes what the original
//! computes, on enumerated or sampled sensitive inputs.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::asm::{Encoding, LinkedProgram, Loc, Word};
use crate::machine::{Machine, MachineConfig, MachineError};

/// Relates cells of the original program to cells of the transformed one
/// and converts bits to words on both sides.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DplStateMap {
    /// Encoding of the original program (plain by default).
    pub original: Encoding,
    pub transformed: Encoding,
    pub cell_map: BTreeMap<Loc, Loc>,
}

impl DplStateMap {
    pub fn new(transformed: Encoding) -> DplStateMap {
        DplStateMap {
            original: Encoding::PLAIN,
            transformed,
            cell_map: BTreeMap::new(),
        }
    }

    /// Map built from the encodings the two programs declare.
    pub fn for_programs(original: &LinkedProgram, transformed: &LinkedProgram) -> DplStateMap {
        DplStateMap {
            original: original.encoding.unwrap_or(Encoding::PLAIN),
            transformed: transformed.encoding.unwrap_or(Encoding::PLAIN),
            cell_map: BTreeMap::new(),
        }
    }

    pub fn physical(&self, loc: Loc) -> Loc {
        self.cell_map.get(&loc).copied().unwrap_or(loc)
    }

    pub fn encode(&self, bit: bool) -> Word {
        self.transformed.encode(bit)
    }

    /// Strict: anything but the two encoded words is poison.
    pub fn decode(&self, word: Word) -> Option<bool> {
        self.transformed.decode(word)
    }

    /// Reading of an original-program cell. Only the bit carrying logical
    /// 1 counts, so a plain `not` on a one-bit cell still reads correctly.
    pub fn read_original(&self, word: Word) -> bool {
        word & (self.original.one ^ self.original.zero) == self.original.one & !self.original.zero
    }
}

/// Which input assignments to run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum InputSpec {
    /// All assignments when there are at most `threshold` sensitive bits,
    /// otherwise `samples` random ones.
    Auto { threshold: usize, samples: usize },
    Exhaustive,
    Sampled(usize),
    /// Given assignments, one bit per sensitive cell.
    Explicit(Vec<Vec<bool>>),
}

impl Default for InputSpec {
    fn default() -> Self {
        InputSpec::Auto {
            threshold: 16,
            samples: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Failure {
    pub input: String,
    pub expected: String,
    pub actual: String,
    /// Output cells holding a word that is not a valid encoding.
    pub poisoned: Vec<Loc>,
    pub error: Option<String>,
}

impl Failure {
    pub fn is_poison(&self) -> bool {
        !self.poisoned.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct EquivalenceVerdict {
    pub checked: usize,
    pub exhaustive: bool,
    pub failures: Vec<Failure>,
}

impl EquivalenceVerdict {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Hex of a bit vector read as a number whose bit `i` is `bits[i]`.
pub fn bits_to_hex(bits: &[bool]) -> String {
    if bits.is_empty() {
        return "0".into();
    }
    let mut bytes = vec![0u8; bits.len().div_ceil(8)];
    for (i, b) in bits.iter().enumerate() {
        if *b {
            bytes[i / 8] |= 1 << (i % 8);
        }
    }
    bytes.reverse();
    let s = hex::encode(bytes);
    let digits = bits.len().div_ceil(4);
    s[s.len() - digits..].to_string()
}

/// Number to bits, least significant first.
pub fn u128_bits(value: u128, n: usize) -> Vec<bool> {
    (0..n).map(|i| i < 128 && (value >> i) & 1 == 1).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RunOutput {
    Bits(Vec<bool>),
    Poison { bits: Vec<Option<bool>> },
}

/// Runs the original program on an assignment and reads its outputs.
pub fn run_original(
    program: &LinkedProgram,
    map: &DplStateMap,
    cfg: &MachineConfig,
    input: &[bool],
    max_steps: u64,
) -> Result<Vec<bool>, MachineError> {
    let m = Machine::new(*cfg);
    let mut st = m.initial_state();
    for (l, b) in program.sensitive.iter().zip(input) {
        st.set(*l, map.original.encode(*b));
    }
    let r = m.run(program, st, max_steps)?;
    Ok(program
        .outputs
        .iter()
        .map(|l| map.read_original(r.final_state.get(*l)))
        .collect())
}

/// Runs the transformed program on the encoded assignment.
pub fn run_transformed(
    program: &LinkedProgram,
    original_cells: (&[Loc], &[Loc]),
    map: &DplStateMap,
    cfg: &MachineConfig,
    input: &[bool],
    max_steps: u64,
) -> Result<Vec<Option<bool>>, MachineError> {
    let (inputs, outputs) = original_cells;
    let m = Machine::new(*cfg);
    let mut st = m.initial_state();
    for (l, b) in inputs.iter().zip(input) {
        st.set(map.physical(*l), map.encode(*b));
    }
    let r = m.run(program, st, max_steps)?;
    Ok(outputs
        .iter()
        .map(|l| map.decode(r.final_state.get(map.physical(*l))))
        .collect())
}

/// Compares the two programs on the selected inputs.
pub fn check(
    original: &LinkedProgram,
    transformed: &LinkedProgram,
    map: &DplStateMap,
    inputs: &InputSpec,
    seed: u64,
    cfg: &MachineConfig,
    max_steps: u64,
) -> EquivalenceVerdict {
    let n = original.sensitive.len();
    let (exhaustive, assignments): (bool, Box<dyn Iterator<Item = Vec<bool>>>) = match inputs {
        InputSpec::Explicit(v) => (false, Box::new(v.clone().into_iter())),
        InputSpec::Exhaustive => (true, exhaustive_inputs(n)),
        InputSpec::Auto { threshold, .. } if n <= *threshold => (true, exhaustive_inputs(n)),
        InputSpec::Auto { samples, .. } | InputSpec::Sampled(samples) => {
            (false, sampled_inputs(n, *samples, seed))
        }
    };
    let mut checked = 0;
    let mut failures = Vec::new();
    for input in assignments {
        checked += 1;
        let expected = run_original(original, map, cfg, &input, max_steps);
        let actual = run_transformed(
            transformed,
            (&original.sensitive, &original.outputs),
            map,
            cfg,
            &input,
            max_steps,
        );
        let fail = |expected: String, actual: String, poisoned, error| Failure {
            input: bits_to_hex(&input),
            expected,
            actual,
            poisoned,
            error,
        };
        match (expected, actual) {
            (Ok(e), Ok(a)) => {
                if a.iter().zip(&e).all(|(x, y)| *x == Some(*y)) {
                    continue;
                }
                let poisoned = original
                    .outputs
                    .iter()
                    .zip(&a)
                    .filter(|(_, v)| v.is_none())
                    .map(|(l, _)| *l)
                    .collect();
                let shown: Vec<bool> = a.iter().map(|v| v.unwrap_or(false)).collect();
                failures.push(fail(bits_to_hex(&e), bits_to_hex(&shown), poisoned, None));
            }
            (Err(e), _) => failures.push(fail(String::new(), String::new(), Vec::new(), Some(format!("original: {e}")))),
            (_, Err(e)) => failures.push(fail(String::new(), String::new(), Vec::new(), Some(format!("transformed: {e}")))),
        }
    }
    EquivalenceVerdict {
        checked,
        exhaustive,
        failures,
    }
}

fn exhaustive_inputs(n: usize) -> Box<dyn Iterator<Item = Vec<bool>>> {
    assert!(n < 32, "exhaustive enumeration of {n} bits");
    Box::new((0u64..1 << n).map(move |v| u128_bits(v as u128, n)))
}

fn sampled_inputs(n: usize, samples: usize, seed: u64) -> Box<dyn Iterator<Item = Vec<bool>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Box::new((0..samples).map(move |_| (0..n).map(|_| rng.random()).collect()))
}
