//! Bitsliced PRESENT-80 in the generic assembly language, and a reference
//! implementation of the cipher used as the oracle.

use std::fmt::Write as _;
use std::ops::Range;

use crate::asm::{parse, LinkedProgram, Loc, Program};
use crate::machine::{Machine, MachineConfig, MachineError};

pub const SBOX: [u8; 16] = [
    0xC, 0x5, 0x6, 0xB, 0x9, 0x0, 0xA, 0xD, 0x3, 0xE, 0xF, 0x8, 0x4, 0x7, 0x1, 0x2,
];
pub const ROUNDS: usize = 31;
pub const KEY_MASK: u128 = (1 << 80) - 1;

/// Static description of the cipher.
#[derive(Clone, Debug)]
pub struct CipherSpec {
    pub name: &'static str,
    pub block_bits: usize,
    pub key_bits: usize,
    pub rounds: usize,
    pub sbox: [u8; 16],
    pub player: [usize; 64],
}

pub fn present80() -> CipherSpec {
    let mut player = [0; 64];
    for (i, p) in player.iter_mut().enumerate() {
        *p = perm(i);
    }
    CipherSpec {
        name: "PRESENT-80",
        block_bits: 64,
        key_bits: 80,
        rounds: ROUNDS,
        sbox: SBOX,
        player,
    }
}

/// Position bit `i` moves to in the permutation layer.
pub fn perm(i: usize) -> usize {
    if i == 63 {
        63
    } else {
        16 * i % 63
    }
}

pub fn inverse_sbox() -> [u8; 16] {
    let mut inv = [0; 16];
    for (x, y) in SBOX.iter().enumerate() {
        inv[*y as usize] = x as u8;
    }
    inv
}

pub fn sbox_layer(s: u64) -> u64 {
    (0..16).fold(0, |acc, j| {
        acc | (SBOX[(s >> (4 * j) & 0xF) as usize] as u64) << (4 * j)
    })
}

pub fn player(s: u64) -> u64 {
    (0..64).fold(0, |acc, i| acc | ((s >> i) & 1) << perm(i))
}

/// The 32 round keys of an 80-bit key.
pub fn round_keys(key: u128) -> [u64; 32] {
    let mut k = key & KEY_MASK;
    let mut out = [0; 32];
    for (r, rk) in out.iter_mut().enumerate() {
        *rk = (k >> 16) as u64;
        k = ((k << 61) | (k >> 19)) & KEY_MASK;
        let top = SBOX[(k >> 76) as usize] as u128;
        k = (k & !(0xF << 76)) | top << 76;
        k ^= ((r + 1) as u128) << 15;
    }
    out
}

pub fn reference_encrypt(plaintext: u64, key: u128) -> u64 {
    let rk = round_keys(key);
    let mut s = plaintext;
    for k in &rk[..ROUNDS] {
        s = player(sbox_layer(s ^ k));
    }
    s ^ rk[ROUNDS]
}

/// Key nibble mixed into plaintext nibble `j` in the first round.
pub fn first_round_key_nibble(key: u128, j: usize) -> u8 {
    ((key >> (16 + 4 * j)) & 0xF) as u8
}

pub const STATE: u32 = 256;
pub const KEY: u32 = 320;
pub const TMP: u32 = 400;
pub const KTMP: u32 = 464;
/// First cell free for look-up tables.
pub const LUT_BASE: u32 = 768;

/// Gates of the S-box; inputs x0..x3 in r1..r4 (x0 most significant),
/// outputs y0..y3 in r9..r12.
pub const SBOX_GATES: [&str; 14] = [
    "xor r5 r3 r2",
    "and r6 r2 r5",
    "xor r7 r1 r6",
    "xor r12 r4 r7",
    "and r6 r5 r7",
    "xor r5 r5 r12",
    "xor r6 r6 r2",
    "orr r8 r4 r6",
    "xor r11 r5 r8",
    "xor r4 r4 #1",
    "xor r6 r6 r4",
    "xor r9 r11 r6",
    "orr r6 r6 r5",
    "xor r10 r7 r6",
];

/// Standalone S-box with its input and output registers declared.
pub fn sbox_source() -> String {
    let mut s = String::from(";@sensitive r1..r4\n;@output r9..r12\n");
    for g in SBOX_GATES {
        s.push_str(g);
        s.push('\n');
    }
    s
}

fn sbox_block(s: &mut String, load: impl Fn(usize) -> String) {
    // x0 is the most significant input bit
    for (k, reg) in (1..=4).enumerate() {
        let cell = load(3 - k);
        let _ = writeln!(s, "  mov r{reg} r31\n  mov r{reg} {cell}");
    }
    for g in SBOX_GATES {
        let _ = writeln!(s, "  {g}");
    }
    for (k, reg) in (9..=12).enumerate() {
        let cell = load(3 - k);
        let _ = writeln!(s, "  mov {cell} r31\n  mov {cell} r{reg}");
    }
}

/// Source text of the unprotected bitsliced implementation.
pub fn present80_source() -> String {
    let mut s = String::new();
    let w = &mut s;
    let _ = writeln!(w, "; PRESENT-80, one bit per memory cell");
    let _ = writeln!(w, "; state bit i at @{}, key bit i at @{}", STATE, KEY);
    let _ = writeln!(w, ";@sensitive @{}..@{}", STATE, STATE + 63);
    let _ = writeln!(w, ";@sensitive @{}..@{}", KEY, KEY + 79);
    let _ = writeln!(w, ";@output @{}..@{}", STATE, STATE + 63);
    let _ = writeln!(w, "  mov r31 #0 ;@public");
    let _ = writeln!(w, "  mov r30 #1 ;@public");
    let _ = writeln!(w, "round:");
    let _ = writeln!(w, "  mov r29 #0 ;@public");
    let _ = writeln!(w, "ark:");
    for b in 0..4 {
        let (st, k) = (STATE + b, KEY + 16 + b);
        let _ = writeln!(w, "  xor !r29,{st} !r29,{st} !r29,{k}");
    }
    let _ = writeln!(w, "  add r29 r29 #4 ;@public");
    let _ = writeln!(w, "  bne r29 #64 ark");
    let _ = writeln!(w, "  beq r30 #32 done");

    let _ = writeln!(w, "sbox_layer:");
    let _ = writeln!(w, "  mov r29 #0 ;@public");
    let _ = writeln!(w, "sbox_loop:");
    sbox_block(w, |b| format!("!r29,{}", STATE as usize + b));
    let _ = writeln!(w, "  add r29 r29 #4 ;@public");
    let _ = writeln!(w, "  bne r29 #64 sbox_loop");

    let _ = writeln!(w, "player:");
    for i in 0..64u32 {
        let t = TMP + perm(i as usize) as u32;
        let _ = writeln!(w, "  mov @{t} r31\n  mov @{t} @{}", STATE + i);
    }
    for i in 0..64u32 {
        let st = STATE + i;
        let _ = writeln!(w, "  mov @{st} r31\n  mov @{st} @{}", TMP + i);
    }

    let _ = writeln!(w, "key_update:");
    for i in 0..80u32 {
        let t = KTMP + i;
        let _ = writeln!(w, "  mov @{t} r31\n  mov @{t} @{}", KEY + (i + 19) % 80);
    }
    for i in 0..80u32 {
        let k = KEY + i;
        let _ = writeln!(w, "  mov @{k} r31\n  mov @{k} @{}", KTMP + i);
    }
    sbox_block(w, |b| format!("@{}", KEY as usize + 76 + b));
    for j in 0..5u32 {
        let k = KEY + 15 + j;
        let _ = writeln!(w, "  and r27 r30 #{} ;@public", 1 << j);
        let _ = writeln!(w, "  beq r27 #0 rc{j}");
        let _ = writeln!(w, "  xor @{k} @{k} #1");
        let _ = writeln!(w, "rc{j}:");
    }
    let _ = writeln!(w, "  add r30 r30 #1 ;@public");
    let _ = writeln!(w, "  jmp round");
    let _ = writeln!(w, "done:");
    s
}

/// Assignment of the sensitive cells, in declaration order: the 64
/// plaintext bits then the 80 key bits, least significant first.
pub fn input_bits(plaintext: u64, key: u128) -> Vec<bool> {
    (0..64)
        .map(|i| (plaintext >> i) & 1 == 1)
        .chain((0..80).map(|i| (key >> i) & 1 == 1))
        .collect()
}

pub fn output_value(bits: &[bool]) -> u64 {
    bits.iter()
        .take(64)
        .enumerate()
        .fold(0, |acc, (i, b)| acc | (*b as u64) << i)
}

pub fn state_cells() -> Vec<Loc> {
    (0..64).map(|i| Loc::Mem(STATE + i)).collect()
}

pub fn key_cells() -> Vec<Loc> {
    (0..80).map(|i| Loc::Mem(KEY + i)).collect()
}

#[derive(Clone, Debug)]
pub struct CorpusEntry {
    pub name: &'static str,
    pub file_name: &'static str,
    pub source: String,
    pub program: Program,
    pub sensitive: Vec<Loc>,
    pub outputs: Vec<Loc>,
    pub lines: usize,
    pub instructions: usize,
    pub logical_ops: usize,
    pub sbox_gates: usize,
}

pub fn build_corpus() -> Vec<CorpusEntry> {
    let source = present80_source();
    let program = parse(&source).expect("generated corpus parses");
    let logical_ops = program
        .instructions()
        .filter(|i| matches!(i.opcode().mnemonic(), "and" | "orr" | "xor"))
        .count();
    vec![CorpusEntry {
        name: "PRESENT-80",
        file_name: "present80.asm",
        lines: source.lines().count(),
        instructions: program.len(),
        sensitive: program.sensitive_cells(),
        outputs: program.output_cells(),
        logical_ops,
        sbox_gates: SBOX_GATES.len(),
        program,
        source,
    }]
}

/// Cycles at which execution reaches the instruction labelled `label`, for
/// an all-zero input.
pub fn label_visits(program: &LinkedProgram, label: &str, cfg: &MachineConfig, max_steps: u64) -> Result<Vec<u64>, MachineError> {
    let Some(target) = program.label(label) else {
        return Ok(Vec::new());
    };
    let m = Machine::new(*cfg);
    let mut st = m.initial_state();
    let mut visits = Vec::new();
    let mut steps = 0;
    while st.pc < program.len() {
        if st.pc == target {
            visits.push(st.cycle);
        }
        if steps == max_steps {
            return Err(MachineError::StepLimit(max_steps));
        }
        m.step(&mut st, program, &mut |_| {})?;
        steps += 1;
    }
    Ok(visits)
}

/// Attack windows of a corpus program.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Windows {
    /// The whole first round.
    pub round: Range<usize>,
    /// The first S-box evaluation only.
    pub narrow: Range<usize>,
}

pub fn windows(program: &LinkedProgram, cfg: &MachineConfig) -> Result<Windows, MachineError> {
    let span = |label: &str| -> Result<Range<usize>, MachineError> {
        let v = label_visits(program, label, cfg, 50_000_000)?;
        match v.as_slice() {
            [a, b, ..] => Ok(*a as usize..*b as usize),
            _ => Ok(0..0),
        }
    };
    Ok(Windows {
        round: span("round")?,
        narrow: span("sbox_loop")?,
    })
}
