//! `lab` and `corpus` subcommands: trace synthesis and attacks.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use dpl_core::asm::{adapter_by_name, LinkedProgram, Program};
use dpl_core::corpus::{present80_source, windows};
use dpl_core::lab::{
    cpa_monobit, nicv, profile_bits, read_traces, success_rate, synth_traces, write_curve_csv, write_traces, Campaign,
    InputLayout, LeakModel, MonobitTarget, TraceSet,
};
use dpl_core::machine::MachineConfig;
use serde_json::json;

use crate::{Failure, EXIT_PARSE, EXIT_SIMULATE};

const VECTORS: &str = include_str!("../../core/corpus/present80_vectors.csv");

#[derive(Parser)]
#[command(name = "dplc", about = "DPL toolchain side-channel lab")]
struct Cli {
    #[command(subcommand)]
    command: Top,
}

#[derive(Subcommand)]
enum Top {
    /// Simulated power traces and attacks
    #[command(subcommand)]
    Lab(Box<LabCmd>),
    /// Write or print the bundled PRESENT-80 program
    Corpus {
        /// Directory receiving present80.asm and present80_vectors.csv
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum LabCmd {
    /// Synthesize a trace file
    Traces {
        #[command(flatten)]
        prog: ProgramArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Normalized inter-class variance per cycle
    Nicv {
        traces: PathBuf,
        /// Plaintext nibble defining the 16 classes
        #[arg(long, default_value_t = 0)]
        nibble: usize,
        /// Per-cycle values as CSV
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Monobit correlation attack on a trace file
    Cpa {
        traces: PathBuf,
        #[arg(long, default_value_t = 0)]
        nibble: usize,
        /// Absolute cycle window a..b, default the whole file
        #[arg(long)]
        window: Option<String>,
        /// Key as hex, overriding the one stored with the traces
        #[arg(long)]
        key: Option<String>,
    },
    /// Attack success rate against the number of traces
    SuccessRate {
        #[command(flatten)]
        prog: ProgramArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0)]
        nibble: usize,
        /// Comma separated trace counts
        #[arg(long, default_value = "50,100,200,500,1000")]
        grid: String,
        #[arg(long, default_value_t = 100)]
        attacks: usize,
        /// CSV output, default stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank bit positions by leakage and recommend a rail pair
    Profile {
        #[command(flatten)]
        prog: ProgramArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 300)]
        n: usize,
        #[arg(long, default_value_t = 1e-9)]
        tie: f64,
    },
}

#[derive(Args)]
struct ProgramArgs {
    program: PathBuf,
    /// Syntax adapter
    #[arg(short = 'a', long, default_value = "generic")]
    adapter: String,
    /// Sensitive cells holding the plaintext; the rest hold the key
    #[arg(long, default_value_t = 64)]
    block_bits: usize,
    #[arg(long, default_value_t = 8)]
    width: u32,
    #[arg(long, default_value_t = 32)]
    registers: usize,
    #[arg(long, default_value_t = 1024)]
    memory: usize,
    /// Key as hex
    #[arg(long, default_value = "0123456789abcdef0f1e")]
    key: String,
    /// `round`, `narrow` (labelled spans) or a..b; default the whole run
    #[arg(long)]
    window: Option<String>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value_t = 4.0)]
    sigma: f64,
    /// Comma separated per-bit weights, bit 0 first
    #[arg(long)]
    weights: Option<String>,
    /// Ignore data bus events
    #[arg(long)]
    no_bus: bool,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
}

fn err(code: u8) -> impl Fn(String) -> Failure {
    move |m| Failure::new(code, m)
}

fn parse_range(s: &str) -> Result<Range<usize>, Failure> {
    let bad = || Failure::new(EXIT_PARSE, format!("bad window `{s}`, expected a..b"));
    let (a, b) = s.split_once("..").ok_or_else(bad)?;
    let a = a.trim().parse().map_err(|_| bad())?;
    let b = b.trim().parse().map_err(|_| bad())?;
    if a > b {
        return Err(bad());
    }
    Ok(a..b)
}

fn parse_key(s: &str) -> Result<u128, Failure> {
    u128::from_str_radix(s.trim_start_matches("0x"), 16).map_err(|_| Failure::new(EXIT_PARSE, format!("bad key `{s}`")))
}

impl ProgramArgs {
    fn machine(&self) -> MachineConfig {
        MachineConfig {
            word_width: self.width,
            registers: self.registers,
            memory: self.memory,
        }
    }

    fn program(&self) -> Result<Program, Failure> {
        let adapter = adapter_by_name(&self.adapter)
            .ok_or_else(|| Failure::new(EXIT_PARSE, format!("unknown adapter `{}`", self.adapter)))?;
        let src = std::fs::read_to_string(&self.program)
            .map_err(|e| Failure::new(EXIT_PARSE, format!("{}: {e}", self.program.display())))?;
        adapter.parse(&src).map_err(|e| Failure::new(EXIT_PARSE, e.to_string()))
    }

    fn linked(&self) -> Result<LinkedProgram, Failure> {
        let p = self.program()?.resolve().map_err(|e| Failure::new(EXIT_PARSE, e.to_string()))?;
        let m = self.machine();
        p.check_bounds(m.registers, m.memory, m.word_width)
            .map_err(|e| Failure::new(EXIT_SIMULATE, e.to_string()))?;
        Ok(p)
    }

    fn window(&self, p: &LinkedProgram) -> Result<Option<Range<usize>>, Failure> {
        let Some(w) = self.window.as_deref() else {
            return Ok(None);
        };
        let named = |name: &str| -> Result<Option<Range<usize>>, Failure> {
            let ws = windows(p, &self.machine()).map_err(|e| Failure::new(EXIT_SIMULATE, e.to_string()))?;
            let r = if name == "round" { ws.round } else { ws.narrow };
            if r.is_empty() {
                return Err(Failure::new(EXIT_PARSE, format!("program has no `{name}` window")));
            }
            Ok(Some(r))
        };
        match w {
            "round" | "narrow" => named(w),
            _ => parse_range(w).map(Some),
        }
    }
}

impl ModelArgs {
    fn model(&self, width: u32) -> Result<LeakModel, Failure> {
        let mut m = match &self.weights {
            Some(w) => {
                let ws: Result<Vec<f64>, _> = w.split(',').map(|x| x.trim().parse::<f64>()).collect();
                LeakModel::with_weights(ws.map_err(|_| Failure::new(EXIT_PARSE, format!("bad weights `{w}`")))?, self.sigma)
            }
            None => LeakModel::uniform(width, self.sigma),
        };
        m.include_bus = !self.no_bus;
        Ok(m)
    }
}

/// Metadata the binary trace header has no room for.
fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn save(ts: &TraceSet, path: &Path) -> Result<(), Failure> {
    let io = |p: &Path, e: std::io::Error| Failure::new(EXIT_PARSE, format!("{}: {e}", p.display()));
    let mut w = create(path)?;
    write_traces(ts, &mut w).and_then(|_| w.flush()).map_err(|e| io(path, e))?;
    let meta = json!({"window_start": ts.window_start, "key": format!("{:x}", ts.key), "seed": ts.seed});
    let side = sidecar(path);
    std::fs::write(&side, meta.to_string()).map_err(|e| io(&side, e))
}

fn load(path: &Path, key: Option<&str>) -> Result<TraceSet, Failure> {
    let f = File::open(path).map_err(|e| Failure::new(EXIT_PARSE, format!("{}: {e}", path.display())))?;
    let mut ts =
        read_traces(BufReader::new(f)).map_err(|e| Failure::new(EXIT_PARSE, format!("{}: {e}", path.display())))?;
    if let Ok(text) = std::fs::read_to_string(sidecar(path)) {
        let meta: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Failure::new(EXIT_PARSE, format!("{}: {e}", sidecar(path).display())))?;
        ts.window_start = meta["window_start"].as_u64().unwrap_or(0) as usize;
        ts.seed = meta["seed"].as_u64().unwrap_or(0);
        if let Some(k) = meta["key"].as_str() {
            ts.key = parse_key(k)?;
        }
    }
    if let Some(k) = key {
        ts.key = parse_key(k)?;
    }
    Ok(ts)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::new(EXIT_PARSE, format!("{}: {e}", path.display())))
}

pub fn main(args: &[String]) -> Result<(), Failure> {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(Failure::new(EXIT_PARSE, e.to_string().trim_end().to_string())),
    };
    match cli.command {
        Top::Corpus { out } => corpus(out),
        Top::Lab(cmd) => lab(*cmd),
    }
}

fn corpus(out: Option<PathBuf>) -> Result<(), Failure> {
    let src = present80_source();
    match out {
        None => print!("{src}"),
        Some(dir) => {
            let io = |e: std::io::Error| Failure::new(EXIT_PARSE, format!("{}: {e}", dir.display()));
            std::fs::create_dir_all(&dir).map_err(io)?;
            std::fs::write(dir.join("present80.asm"), src).map_err(io)?;
            std::fs::write(dir.join("present80_vectors.csv"), VECTORS).map_err(io)?;
        }
    }
    Ok(())
}

fn lab(cmd: LabCmd) -> Result<(), Failure> {
    let sim = err(EXIT_SIMULATE);
    match cmd {
        LabCmd::Traces { prog, model, n, out } => {
            let p = prog.linked()?;
            let key = parse_key(&prog.key)?;
            let window = prog.window(&p)?;
            let layout = InputLayout::for_program(&p, prog.block_bits);
            let m = model.model(prog.width)?;
            let ts = synth_traces(&p, &prog.machine(), layout, key, n, &m, model.seed, window)
                .map_err(|e| sim(e.to_string()))?;
            save(&ts, &out)?;
            println!(
                "{}",
                json!({"runs": ts.n_runs(), "cycles": ts.n_cycles, "window_start": ts.window_start, "out": out.display().to_string()})
            );
        }
        LabCmd::Nicv { traces, nibble, csv } => {
            let ts = load(&traces, None)?;
            let target = MonobitTarget::present(nibble);
            let v = nicv(&ts, 16, |pt| target.class(pt)).map_err(|e| sim(e.to_string()))?;
            let (arg, max) = v
                .iter()
                .enumerate()
                .fold((0, 0.0f64), |(i, m), (j, x)| if *x > m { (j, *x) } else { (i, m) });
            if let Some(path) = csv {
                let mut w = create(&path)?;
                let io = |e: std::io::Error| Failure::new(EXIT_PARSE, format!("{}: {e}", path.display()));
                writeln!(w, "cycle,nicv").map_err(io)?;
                for (i, x) in v.iter().enumerate() {
                    writeln!(w, "{},{x}", ts.window_start + i).map_err(io)?;
                }
                w.flush().map_err(io)?;
            }
            println!("{}", json!({"runs": ts.n_runs(), "max": max, "argmax_cycle": ts.window_start + arg}));
        }
        LabCmd::Cpa {
            traces,
            nibble,
            window,
            key,
        } => {
            let ts = load(&traces, key.as_deref())?;
            let window = match window {
                Some(w) => parse_range(&w)?,
                None => ts.window(),
            };
            let target = MonobitTarget::present(nibble);
            let r = cpa_monobit(&ts, &target, window).map_err(|e| sim(e.to_string()))?;
            let peaks: Vec<f64> = r
                .correlations
                .iter()
                .map(|row| row.iter().fold(0.0f64, |m, c| m.max(c.abs())))
                .collect();
            println!(
                "{}",
                json!({
                    "runs": r.traces_used,
                    "best_guess": r.best_guess,
                    "true_guess": r.true_guess,
                    "success": r.success,
                    "peak": r.peak,
                    "peaks": peaks,
                })
            );
        }
        LabCmd::SuccessRate {
            prog,
            model,
            nibble,
            grid,
            attacks,
            out,
        } => {
            let p = prog.linked()?;
            let key = parse_key(&prog.key)?;
            let grid: Result<Vec<usize>, _> = grid.split(',').map(|x| x.trim().parse()).collect();
            let grid = grid.map_err(|_| Failure::new(EXIT_PARSE, "bad --grid"))?;
            let window = match prog.window(&p)? {
                Some(w) => w,
                None => {
                    let ts = synth_traces(
                        &p,
                        &prog.machine(),
                        InputLayout::for_program(&p, prog.block_bits),
                        key,
                        1,
                        &LeakModel::uniform(prog.width, 0.0),
                        0,
                        None,
                    )
                    .map_err(|e| sim(e.to_string()))?;
                    ts.window()
                }
            };
            let c = Campaign {
                program: &p,
                machine: prog.machine(),
                layout: InputLayout::for_program(&p, prog.block_bits),
                key,
                model: model.model(prog.width)?,
                target: MonobitTarget::present(nibble),
                window,
            };
            let points = success_rate(&c, &grid, attacks, model.seed).map_err(|e| sim(e.to_string()))?;
            match out {
                Some(path) => write_curve_csv(&points, create(&path)?).map_err(|e| Failure::new(EXIT_PARSE, e.to_string()))?,
                None => write_curve_csv(&points, std::io::stdout().lock()).map_err(|e| Failure::new(EXIT_PARSE, e.to_string()))?,
            }
        }
        LabCmd::Profile { prog, model, n, tie } => {
            let p = prog.program()?;
            let linked = prog.linked()?;
            let key = parse_key(&prog.key)?;
            let window = prog.window(&linked)?;
            let m = model.model(prog.width)?;
            let r = profile_bits(&p, &prog.machine(), prog.block_bits, key, &m, n, model.seed, window, tie)
                .map_err(|e| sim(e.to_string()))?;
            println!("{}", serde_json::to_string(&r).expect("profile serializes"));
        }
    }
    Ok(())
}
