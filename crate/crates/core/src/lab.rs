//! Synthetic power traces and the statistics run on them: NICV, monobit
//! CPA, success rates and per-bit profiling.
//!
//! Seeds: run `r` of `synth_traces` draws its plaintext and noise from a
//! ChaCha8 generator seeded with the root seed on stream `r`. Campaign `a`
//! at grid point `g` of `success_rate` uses stream `(g << 32) | a` and draws
//! its runs in sequence.

use std::io::{self, Read, Write};
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use thiserror::Error;

use crate::asm::{Encoding, LinkedProgram, Loc, Program, Word};
use crate::machine::{EventKind, Machine, MachineConfig, MachineError, MachineState};
use crate::transform::{layouts, single_slot_variant, TransformError};

#[derive(Debug, Error)]
pub enum LabError {
    #[error(transparent)]
    Machine(#[from] MachineError),
    #[error("program is not constant time: {0} and {1} instructions")]
    NotConstantTime(u64, u64),
    #[error("program halts at cycle {halted} before the window ends at {end}")]
    ShortProgram { halted: u64, end: usize },
    #[error("only one class is populated")]
    SingleClass,
    #[error("predictions do not vary over the plaintexts")]
    DegeneratePredictions,
    #[error("window {0:?} outside the {1} recorded cycles")]
    Window(Range<usize>, usize),
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error("fewer than two admissible bits")]
    NoPair,
}

/// Per-bit weights of flipped bits plus Gaussian noise per cycle.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LeakModel {
    pub weights: Vec<f64>,
    pub noise_sigma: f64,
    pub include_bus: bool,
}

impl LeakModel {
    pub fn uniform(width: u32, noise_sigma: f64) -> LeakModel {
        LeakModel {
            weights: vec![1.0; width as usize],
            noise_sigma,
            include_bus: true,
        }
    }

    pub fn with_weights(weights: Vec<f64>, noise_sigma: f64) -> LeakModel {
        LeakModel {
            weights,
            noise_sigma,
            include_bus: true,
        }
    }

    pub fn noiseless(&self) -> LeakModel {
        LeakModel {
            noise_sigma: 0.0,
            ..self.clone()
        }
    }
}

/// Byte-wise lookup of weighted popcounts.
struct WeightTable {
    bytes: [[f64; 256]; 4],
}

impl WeightTable {
    fn new(weights: &[f64]) -> WeightTable {
        let mut bytes = [[0.0; 256]; 4];
        for (k, table) in bytes.iter_mut().enumerate() {
            for (v, slot) in table.iter_mut().enumerate() {
                *slot = (0..8)
                    .filter(|i| v >> i & 1 == 1)
                    .map(|i| weights.get(8 * k + i).copied().unwrap_or(1.0))
                    .sum();
            }
        }
        WeightTable { bytes }
    }

    #[inline]
    fn get(&self, x: Word) -> f64 {
        let mut s = self.bytes[0][(x & 0xFF) as usize];
        let mut rest = x >> 8;
        let mut k = 1;
        while rest != 0 {
            s += self.bytes[k][(rest & 0xFF) as usize];
            rest >>= 8;
            k += 1;
        }
        s
    }
}

/// Where a program expects its plaintext and key bits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InputLayout {
    pub plaintext: Vec<Loc>,
    pub key: Vec<Loc>,
    pub encoding: Encoding,
}

impl InputLayout {
    /// The first `block_bits` sensitive cells hold the plaintext, the rest
    /// the key, each least significant bit first.
    pub fn for_program(program: &LinkedProgram, block_bits: usize) -> InputLayout {
        let n = block_bits.min(program.sensitive.len());
        InputLayout {
            plaintext: program.sensitive[..n].to_vec(),
            key: program.sensitive[n..].to_vec(),
            encoding: program.encoding.unwrap_or(Encoding::PLAIN),
        }
    }

    fn load(&self, st: &mut MachineState, plaintext: u64, key: u128) {
        for (i, l) in self.plaintext.iter().enumerate() {
            st.set(*l, self.encoding.encode(i < 64 && plaintext >> i & 1 == 1));
        }
        for (i, l) in self.key.iter().enumerate() {
            st.set(*l, self.encoding.encode(i < 128 && key >> i & 1 == 1));
        }
    }
}

/// Computes noiseless per-cycle leakage of single runs.
pub struct Simulator<'a> {
    program: &'a LinkedProgram,
    machine: Machine,
    table: WeightTable,
    include_bus: bool,
    layout: InputLayout,
    fresh: MachineState,
    state: MachineState,
    max_steps: u64,
}

impl<'a> Simulator<'a> {
    pub fn new(program: &'a LinkedProgram, cfg: &MachineConfig, model: &LeakModel, layout: InputLayout) -> Simulator<'a> {
        let machine = Machine::new(*cfg);
        let fresh = machine.initial_state();
        Simulator {
            program,
            machine,
            table: WeightTable::new(&model.weights),
            include_bus: model.include_bus,
            layout,
            state: fresh.clone(),
            fresh,
            max_steps: 100_000_000,
        }
    }

    fn reset(&mut self, plaintext: u64, key: u128) {
        self.state.registers.copy_from_slice(&self.fresh.registers);
        self.state.memory.copy_from_slice(&self.fresh.memory);
        self.state.pc = 0;
        self.state.cycle = 0;
        self.layout.load(&mut self.state, plaintext, key);
    }

    /// Leakage of the cycles in `window`, added into `out`. Stops as soon
    /// as the window is complete.
    pub fn leakage(&mut self, plaintext: u64, key: u128, window: &Range<usize>, out: &mut [f64]) -> Result<(), LabError> {
        self.reset(plaintext, key);
        let (start, end) = (window.start as u64, window.end as u64);
        let table = &self.table;
        let bus = self.include_bus;
        while self.state.cycle < end {
            if self.state.pc >= self.program.len() {
                return Err(LabError::ShortProgram {
                    halted: self.state.cycle,
                    end: window.end,
                });
            }
            let c = self.state.cycle;
            if c >= start {
                let slot = &mut out[(c - start) as usize];
                self.machine.step(&mut self.state, self.program, &mut |e| {
                    if bus || !matches!(e.kind, EventKind::AddrBus | EventKind::DataBus) {
                        *slot += table.get(e.old ^ e.new);
                    }
                })?;
            } else {
                self.machine.step(&mut self.state, self.program, &mut |_| {})?;
            }
        }
        Ok(())
    }

    /// Full run; returns the instruction count.
    pub fn run_length(&mut self, plaintext: u64, key: u128) -> Result<u64, LabError> {
        self.reset(plaintext, key);
        Ok(self
            .machine
            .run_with(self.program, &mut self.state, self.max_steps, &mut |_| {})?)
    }
}

/// Traces of many runs with a fixed key, restricted to a cycle window.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceSet {
    pub n_cycles: usize,
    /// Absolute cycle of the first column.
    pub window_start: usize,
    /// Row-major, one row per run.
    pub traces: Vec<f32>,
    pub plaintexts: Vec<u64>,
    pub key: u128,
    pub seed: u64,
    pub word_width: u32,
}

impl TraceSet {
    pub fn n_runs(&self) -> usize {
        self.plaintexts.len()
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.traces[r * self.n_cycles..(r + 1) * self.n_cycles]
    }

    pub fn window(&self) -> Range<usize> {
        self.window_start..self.window_start + self.n_cycles
    }

    /// Column indices of an absolute cycle window.
    fn columns(&self, window: &Range<usize>) -> Result<Range<usize>, LabError> {
        let w = self.window();
        if window.start < w.start || window.end > w.end || window.start > window.end {
            return Err(LabError::Window(window.clone(), self.n_cycles));
        }
        Ok(window.start - w.start..window.end - w.start)
    }
}

fn noise(sigma: f64) -> Option<Normal<f64>> {
    (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("finite sigma"))
}

/// Simulates `n` runs with random plaintexts. With no window the whole
/// program is recorded and every run must take the same time.
#[allow(clippy::too_many_arguments)]
pub fn synth_traces(
    program: &LinkedProgram,
    cfg: &MachineConfig,
    layout: InputLayout,
    key: u128,
    n: usize,
    model: &LeakModel,
    seed: u64,
    window: Option<Range<usize>>,
) -> Result<TraceSet, LabError> {
    let mut sim = Simulator::new(program, cfg, model, layout);
    let full = window.is_none();
    let window = match window {
        Some(w) => w,
        None => 0..sim.run_length(0, key)? as usize,
    };
    let width = window.len();
    let noise = noise(model.noise_sigma);
    let mut traces = Vec::with_capacity(n * width);
    let mut plaintexts = Vec::with_capacity(n);
    let mut buf = vec![0.0; width];
    for r in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let pt: u64 = rng.random();
        if full {
            let len = sim.run_length(pt, key)?;
            if len != window.end as u64 {
                return Err(LabError::NotConstantTime(window.end as u64, len));
            }
        }
        buf.iter_mut().for_each(|x| *x = 0.0);
        sim.leakage(pt, key, &window, &mut buf)?;
        for v in &buf {
            let e = noise.as_ref().map_or(0.0, |d| d.sample(&mut rng));
            traces.push((v + e) as f32);
        }
        plaintexts.push(pt);
    }
    Ok(TraceSet {
        n_cycles: width,
        window_start: window.start,
        traces,
        plaintexts,
        key,
        seed,
        word_width: cfg.word_width,
    })
}

/// Per-class sums of trace columns, enough for NICV and CPA with a
/// class-determined prediction.
#[derive(Clone, Debug)]
pub struct ClassStats {
    pub n_classes: usize,
    pub width: usize,
    counts: Vec<u64>,
    sums: Vec<f64>,
    sumsq: Vec<f64>,
    /// First row; columns are accumulated relative to it.
    shift: Option<Vec<f64>>,
}

impl ClassStats {
    pub fn new(n_classes: usize, width: usize) -> ClassStats {
        ClassStats {
            n_classes,
            width,
            counts: vec![0; n_classes],
            sums: vec![0.0; n_classes * width],
            sumsq: vec![0.0; width],
            shift: None,
        }
    }

    pub fn add<T: Copy + Into<f64>>(&mut self, class: usize, row: &[T]) {
        let shift = self
            .shift
            .get_or_insert_with(|| row.iter().map(|x| (*x).into()).collect());
        self.counts[class] += 1;
        let sums = &mut self.sums[class * self.width..(class + 1) * self.width];
        for ((s, q), (x, k)) in sums.iter_mut().zip(self.sumsq.iter_mut()).zip(row.iter().zip(shift.iter())) {
            let d = (*x).into() - k;
            *s += d;
            *q += d * d;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn populated(&self) -> usize {
        self.counts.iter().filter(|c| **c > 0).count()
    }

    fn column_moments(&self, t: usize) -> (f64, f64) {
        let n = self.total() as f64;
        let s: f64 = (0..self.n_classes).map(|c| self.sums[c * self.width + t]).sum();
        let mean = s / n;
        (mean, (self.sumsq[t] / n - mean * mean).max(0.0))
    }

    /// Var[E[L|V]] / Var[L] per column; 0 where the column is constant.
    pub fn nicv(&self) -> Result<Vec<f64>, LabError> {
        if self.populated() < 2 {
            return Err(LabError::SingleClass);
        }
        let n = self.total() as f64;
        Ok((0..self.width)
            .map(|t| {
                let (mean, var) = self.column_moments(t);
                if var <= 1e-12 * (1.0 + mean * mean) {
                    return 0.0;
                }
                let inter: f64 = (0..self.n_classes)
                    .filter(|c| self.counts[*c] > 0)
                    .map(|c| {
                        let nc = self.counts[c] as f64;
                        let m = self.sums[c * self.width + t] / nc;
                        nc / n * (m - mean) * (m - mean)
                    })
                    .sum();
                (inter / var).clamp(0.0, 1.0)
            })
            .collect())
    }

    /// Pearson correlation of a per-class prediction with each column.
    pub fn correlation(&self, predict: impl Fn(usize) -> f64) -> Option<Vec<f64>> {
        let n = self.total() as f64;
        let p: Vec<f64> = (0..self.n_classes).map(predict).collect();
        let sp: f64 = (0..self.n_classes).map(|c| self.counts[c] as f64 * p[c]).sum();
        let spp: f64 = (0..self.n_classes).map(|c| self.counts[c] as f64 * p[c] * p[c]).sum();
        let mp = sp / n;
        let varp = spp / n - mp * mp;
        if varp <= 1e-12 {
            return None;
        }
        Some(
            (0..self.width)
                .map(|t| {
                    let (mean, var) = self.column_moments(t);
                    if var <= 1e-12 * (1.0 + mean * mean) {
                        return 0.0;
                    }
                    let spt: f64 = (0..self.n_classes).map(|c| p[c] * self.sums[c * self.width + t]).sum();
                    let cov = spt / n - mp * mean;
                    (cov / (varp * var).sqrt()).clamp(-1.0, 1.0)
                })
                .collect(),
        )
    }
}

/// NICV per column of a trace set under a class labelling of plaintexts.
pub fn nicv(traces: &TraceSet, n_classes: usize, classify: impl Fn(u64) -> usize) -> Result<Vec<f64>, LabError> {
    let mut stats = ClassStats::new(n_classes, traces.n_cycles);
    for r in 0..traces.n_runs() {
        stats.add(classify(traces.plaintexts[r]), traces.row(r));
    }
    stats.nicv()
}

/// A single predicted bit: one S-box output bit on one plaintext nibble
/// mixed with a 4-bit guess.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct MonobitTarget {
    pub nibble: usize,
    pub sbox: [u8; 16],
    /// Output bit, numeric position.
    pub bit: u32,
    /// Bit of the key holding guess bit 0 of nibble 0.
    pub key_offset: u32,
}

impl MonobitTarget {
    /// Targets y0, the first output of the gate-level S-box (numeric bit
    /// 3). Numeric bit 0 is invariant under guess ^ 9 and flips under
    /// guess ^ 1, so it cannot single out a key nibble.
    pub fn present(nibble: usize) -> MonobitTarget {
        MonobitTarget {
            nibble,
            sbox: crate::corpus::SBOX,
            bit: 3,
            key_offset: 16,
        }
    }

    pub fn class(&self, plaintext: u64) -> usize {
        (plaintext >> (4 * self.nibble) & 0xF) as usize
    }

    pub fn predict(&self, class: usize, guess: u8) -> bool {
        self.sbox[class ^ guess as usize] >> self.bit & 1 == 1
    }

    pub fn true_guess(&self, key: u128) -> u8 {
        (key >> (self.key_offset as usize + 4 * self.nibble) & 0xF) as u8
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttackResult {
    /// One row per guess over the window.
    pub correlations: Vec<Vec<f64>>,
    /// None when no column carries signal.
    pub best_guess: Option<u8>,
    pub true_guess: u8,
    pub success: bool,
    pub traces_used: usize,
    pub peak: f64,
}

/// Monobit CPA from accumulated class statistics.
pub fn cpa_from_stats(stats: &ClassStats, target: &MonobitTarget, true_guess: u8) -> Result<AttackResult, LabError> {
    let mut correlations = Vec::with_capacity(16);
    let mut best: Option<(u8, f64)> = None;
    for g in 0..16u8 {
        let row = stats
            .correlation(|c| target.predict(c, g) as u8 as f64)
            .ok_or(LabError::DegeneratePredictions)?;
        let peak = row.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if peak > 0.0 && best.is_none_or(|(_, p)| peak > p) {
            best = Some((g, peak));
        }
        correlations.push(row);
    }
    let best_guess = best.map(|(g, _)| g);
    Ok(AttackResult {
        correlations,
        best_guess,
        true_guess,
        success: best_guess == Some(true_guess),
        traces_used: stats.total() as usize,
        peak: best.map_or(0.0, |(_, p)| p),
    })
}

/// Monobit CPA over an absolute cycle window of a trace set.
pub fn cpa_monobit(traces: &TraceSet, target: &MonobitTarget, window: Range<usize>) -> Result<AttackResult, LabError> {
    let cols = traces.columns(&window)?;
    let mut stats = ClassStats::new(16, cols.len());
    for r in 0..traces.n_runs() {
        stats.add(target.class(traces.plaintexts[r]), &traces.row(r)[cols.clone()]);
    }
    cpa_from_stats(&stats, target, target.true_guess(traces.key))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub n_traces: usize,
    pub success_rate: f64,
}

/// Everything one attack campaign needs.
#[derive(Clone, Debug)]
pub struct Campaign<'a> {
    pub program: &'a LinkedProgram,
    pub machine: MachineConfig,
    pub layout: InputLayout,
    pub key: u128,
    pub model: LeakModel,
    pub target: MonobitTarget,
    pub window: Range<usize>,
}

/// Runs `n` traces of one attack drawn from `rng` and returns its result.
pub fn run_attack(c: &Campaign<'_>, n: usize, rng: &mut ChaCha8Rng) -> Result<AttackResult, LabError> {
    let mut sim = Simulator::new(c.program, &c.machine, &c.model, c.layout.clone());
    attack_with(&mut sim, c, n, rng)
}

fn attack_with(sim: &mut Simulator<'_>, c: &Campaign<'_>, n: usize, rng: &mut ChaCha8Rng) -> Result<AttackResult, LabError> {
    let width = c.window.len();
    let noise = noise(c.model.noise_sigma);
    let mut stats = ClassStats::new(16, width);
    let mut buf = vec![0.0; width];
    for _ in 0..n {
        let pt: u64 = rng.random();
        buf.iter_mut().for_each(|x| *x = 0.0);
        sim.leakage(pt, c.key, &c.window, &mut buf)?;
        if let Some(d) = &noise {
            for v in buf.iter_mut() {
                *v += d.sample(rng);
            }
        }
        stats.add(c.target.class(pt), &buf);
    }
    match cpa_from_stats(&stats, &c.target, c.target.true_guess(c.key)) {
        Err(LabError::DegeneratePredictions) => Ok(AttackResult {
            correlations: Vec::new(),
            best_guess: None,
            true_guess: c.target.true_guess(c.key),
            success: false,
            traces_used: n,
            peak: 0.0,
        }),
        r => r,
    }
}

/// Fraction of successful independent attacks at each number of traces.
pub fn success_rate(c: &Campaign<'_>, grid: &[usize], attacks: usize, seed: u64) -> Result<Vec<CurvePoint>, LabError> {
    let mut sim = Simulator::new(c.program, &c.machine, &c.model, c.layout.clone());
    let mut out = Vec::with_capacity(grid.len());
    for (g, &n) in grid.iter().enumerate() {
        let mut wins = 0;
        for a in 0..attacks {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((g as u64) << 32) | a as u64);
            if attack_with(&mut sim, c, n, &mut rng)?.success {
                wins += 1;
            }
        }
        out.push(CurvePoint {
            n_traces: n,
            success_rate: wins as f64 / attacks.max(1) as f64,
        });
    }
    Ok(out)
}

/// Variance over runs of each column divided by the noise variance.
pub fn snr(noiseless: &TraceSet, sigma: f64) -> Vec<f64> {
    let n = noiseless.n_runs() as f64;
    (0..noiseless.n_cycles)
        .map(|t| {
            let col = (0..noiseless.n_runs()).map(|r| noiseless.row(r)[t] as f64);
            let mean = col.clone().sum::<f64>() / n;
            let var = col.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            if sigma > 0.0 {
                var / (sigma * sigma)
            } else if var > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Profile {
    /// Max NICV of the single-slot variant using each bit.
    pub scores: Vec<f64>,
    /// Bits from least to most leaky.
    pub ranking: Vec<u32>,
    /// Recommended `(bit_f, bit_t)`.
    pub pair: (u32, u32),
}

/// Runs the variant of a plain bitsliced program computing on each bit
/// position and picks the admissible rail pair with the closest scores,
/// preferring low bits among pairs within `tie_tolerance` of the best.
#[allow(clippy::too_many_arguments)]
pub fn profile_bits(
    plain: &Program,
    cfg: &MachineConfig,
    block_bits: usize,
    key: u128,
    model: &LeakModel,
    n: usize,
    seed: u64,
    window: Option<Range<usize>>,
    tie_tolerance: f64,
) -> Result<Profile, LabError> {
    let target = MonobitTarget::present(0);
    let mut scores = Vec::new();
    for bit in 0..cfg.word_width {
        let variant = single_slot_variant(plain, bit)?
            .resolve()
            .map_err(|e| LabError::Format(e.to_string()))?;
        let layout = InputLayout::for_program(&variant, block_bits);
        let ts = synth_traces(&variant, cfg, layout, key, n, model, seed, window.clone())?;
        let v = nicv(&ts, 16, |pt| target.class(pt))?;
        scores.push(v.into_iter().fold(0.0, f64::max));
    }
    let mut ranking: Vec<u32> = (0..cfg.word_width).collect();
    ranking.sort_by(|a, b| scores[*a as usize].total_cmp(&scores[*b as usize]));
    let pairs = layouts(cfg.word_width);
    let diff = |(f, t): (u32, u32)| (scores[f as usize] - scores[t as usize]).abs();
    let best = pairs.iter().map(|p| diff(*p)).fold(f64::INFINITY, f64::min);
    let pair = pairs
        .iter()
        .copied()
        .filter(|p| diff(*p) <= best + tie_tolerance)
        .min_by_key(|(f, t)| (*f.max(t), *f.min(t)))
        .ok_or(LabError::NoPair)?;
    Ok(Profile { scores, ranking, pair })
}

const MAGIC: &[u8; 4] = b"DPLT";
const VERSION: u32 = 1;

fn plaintext_words(width: u32) -> usize {
    64usize.div_ceil(width as usize)
}

/// Binary trace file: little-endian header `DPLT`, version, runs, cycles,
/// word width; then per run the plaintext as words (least significant
/// first, one u32 each) and the samples as f32.
pub fn write_traces<W: Write>(ts: &TraceSet, mut w: W) -> io::Result<()> {
    w.write_all(MAGIC)?;
    for v in [VERSION, ts.n_runs() as u32, ts.n_cycles as u32, ts.word_width] {
        w.write_all(&v.to_le_bytes())?;
    }
    let width = ts.word_width;
    let mask = if width >= 64 { u64::MAX } else { (1u64 << width) - 1 };
    for r in 0..ts.n_runs() {
        let pt = ts.plaintexts[r];
        for k in 0..plaintext_words(width) {
            let word = (pt.checked_shr(k as u32 * width).unwrap_or(0) & mask) as u32;
            w.write_all(&word.to_le_bytes())?;
        }
        for x in ts.row(r) {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn read_traces<R: Read>(mut r: R) -> Result<TraceSet, LabError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(LabError::Format("bad magic".into()));
    }
    let mut u32s = |n: usize| -> io::Result<Vec<u32>> {
        let mut buf = vec![0u8; 4 * n];
        r.read_exact(&mut buf)?;
        Ok(buf.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    };
    let head = u32s(4)?;
    let [version, n_runs, n_cycles, width] = [head[0], head[1], head[2], head[3]];
    if version != VERSION {
        return Err(LabError::Format(format!("unsupported version {version}")));
    }
    if !(1..=32).contains(&width) {
        return Err(LabError::Format(format!("bad word width {width}")));
    }
    let (n_runs, n_cycles) = (n_runs as usize, n_cycles as usize);
    let mut plaintexts = Vec::with_capacity(n_runs);
    let mut traces = Vec::with_capacity(n_runs * n_cycles);
    for _ in 0..n_runs {
        let words = u32s(plaintext_words(width))?;
        let pt = words
            .iter()
            .enumerate()
            .fold(0u64, |acc, (k, w)| acc | (*w as u64).checked_shl(k as u32 * width).unwrap_or(0));
        plaintexts.push(pt);
        traces.extend(u32s(n_cycles)?.into_iter().map(f32::from_bits));
    }
    Ok(TraceSet {
        n_cycles,
        window_start: 0,
        traces,
        plaintexts,
        key: 0,
        seed: 0,
        word_width: width,
    })
}

/// `n_traces,success_rate` rows.
pub fn write_curve_csv<W: Write>(points: &[CurvePoint], w: W) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    for p in points {
        out.serialize(p)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::parse;

    fn link(src: &str) -> LinkedProgram {
        parse(src).unwrap().resolve().unwrap()
    }

    #[test]
    fn weight_table_matches_popcount() {
        let t = WeightTable::new(&[1.0; 8]);
        for x in [0u32, 1, 0xFF, 0x3FF, 0x1234_5678] {
            assert_eq!(t.get(x), x.count_ones() as f64);
        }
        let t = WeightTable::new(&[3.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(t.get(0b11), 4.0);
        assert_eq!(t.get(0x100), 1.0);
    }

    #[test]
    fn nicv_extremes() {
        let mut s = ClassStats::new(2, 2);
        for _ in 0..10 {
            s.add(0, &[1.0, 5.0]);
            s.add(1, &[3.0, 5.0]);
        }
        assert_eq!(s.nicv().unwrap(), vec![1.0, 0.0]);
        let mut one = ClassStats::new(2, 1);
        one.add(0, &[1.0]);
        assert!(matches!(one.nicv(), Err(LabError::SingleClass)));
    }

    #[test]
    fn correlation_of_exact_prediction() {
        let mut s = ClassStats::new(2, 1);
        for _ in 0..5 {
            s.add(0, &[0.0]);
            s.add(1, &[2.0]);
        }
        assert!((s.correlation(|c| c as f64).unwrap()[0] - 1.0).abs() < 1e-12);
        assert!(s.correlation(|_| 1.0).is_none());
    }

    #[test]
    fn equal_plaintexts_give_equal_rows() {
        let p = link(";@sensitive r1\nmov r2 r1\nxor r3 r2 r1\n");
        let layout = InputLayout::for_program(&p, 1);
        let model = LeakModel::uniform(8, 0.0);
        let ts = synth_traces(&p, &MachineConfig::default(), layout, 0, 50, &model, 3, None).unwrap();
        for r in 0..ts.n_runs() {
            for q in 0..ts.n_runs() {
                if ts.plaintexts[r] & 1 == ts.plaintexts[q] & 1 {
                    assert_eq!(ts.row(r), ts.row(q));
                }
            }
        }
    }

    #[test]
    fn trace_file_round_trip() {
        let p = link(";@sensitive r1..r8\nmov r10 r1\nmov r11 r2\n");
        let layout = InputLayout::for_program(&p, 8);
        let model = LeakModel::uniform(8, 0.5);
        let ts = synth_traces(&p, &MachineConfig::default(), layout, 0, 7, &model, 9, None).unwrap();
        let mut buf = Vec::new();
        write_traces(&ts, &mut buf).unwrap();
        let back = read_traces(&buf[..]).unwrap();
        assert_eq!(back.traces, ts.traces);
        assert_eq!(back.plaintexts, ts.plaintexts);
        assert_eq!(buf.len(), 20 + 7 * (8 * 4 + 2 * 4));
    }

    #[test]
    fn curve_csv() {
        let mut buf = Vec::new();
        write_curve_csv(
            &[CurvePoint {
                n_traces: 10,
                success_rate: 0.5,
            }],
            &mut buf,
        )
        .unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "n_traces,success_rate\n10,0.5\n");
    }

    #[test]
    fn seeds_are_reproducible() {
        let p = link(";@sensitive r1..r4\nmov r10 r1\nxor r11 r2 r3\n");
        let model = LeakModel::uniform(8, 1.0);
        let a = synth_traces(&p, &MachineConfig::default(), InputLayout::for_program(&p, 4), 0, 20, &model, 5, None).unwrap();
        let b = synth_traces(&p, &MachineConfig::default(), InputLayout::for_program(&p, 4), 0, 20, &model, 5, None).unwrap();
        assert_eq!(a, b);
    }
}
