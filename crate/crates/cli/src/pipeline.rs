//! The single-letter flag surface: lint, transform, verify, simulate.

use std::ops::RangeInclusive;
use std::path::PathBuf;

use dpl_core::asm::{adapter_by_name, adapters, Encoding, LinkedProgram, Loc, Program};
use dpl_core::equivalence::{bits_to_hex, check, u128_bits, DplStateMap, InputSpec};
use dpl_core::machine::{write_events_csv, Machine, MachineConfig};
use dpl_core::transform::{transform, DplConfig, TransformReport};
use dpl_core::verify::{verify_program, Verdict, VerifyOptions};
use serde_json::{json, Map, Value};

use crate::{Failure, EXIT_EQUIVALENCE, EXIT_LEAK, EXIT_PARSE, EXIT_SIMULATE, EXIT_TRANSFORM};

const USAGE: &str = "usage: dplc [options] <input-file>
    -bf N     bit used as F in DPL macros (default 1)
    -bt N     bit used as T in DPL macros (default 0)
    -po N     least significant bit of the LUT index pattern
    -cl       compact the look-up tables
    -la ADDR  memory address of the look-up tables (default 0)
    -r1 N     first DPL scratch register (default 20)
    -r2 N     second DPL scratch register (default 21)
    -r3 N     third DPL scratch register (default 22)
    -a NAME   syntax adapter (generic, avr-like)
    -o FILE   write the resulting assembly
    -l        only check syntax
    -d        apply the DPL transformation
    -v        verify balance
    -s        simulate
    -e        check equivalence of the transformed program (with -d)
    -r N      register count for simulation (default 32)
    -m N      memory size for simulation (default 1024)
    -M RANGE  memory cells to display after simulation (A-B or A)
    -R RANGE  registers to display after simulation
    --inputs HEX    sensitive input bits for simulation, cell i = bit i
    --events FILE   write simulation events as CSV
    --width N       word width (default 8)
    --max-steps N   simulation step limit (default 10000000)
    --strict        treat taint warnings as errors

       dplc lab <traces|nicv|cpa|success-rate|profile> ...
       dplc corpus [--out DIR]";

#[derive(Debug, Clone)]
pub struct Options {
    pub bit_f: u32,
    pub bit_t: u32,
    pub pattern_lo: Option<u32>,
    pub compact: bool,
    pub lut_base: u32,
    pub scratch: [u8; 3],
    pub adapter: String,
    pub output: Option<PathBuf>,
    pub lint: bool,
    pub dpl: bool,
    pub verify: bool,
    pub simulate: bool,
    pub equivalence: bool,
    pub registers: usize,
    pub memory: usize,
    pub mem_range: Option<RangeInclusive<u32>>,
    pub reg_range: Option<RangeInclusive<u32>>,
    pub inputs: Option<u128>,
    pub events: Option<PathBuf>,
    pub width: u32,
    pub max_steps: u64,
    pub strict: bool,
    pub input: PathBuf,
}

fn usage_error(msg: impl Into<String>) -> Failure {
    Failure::new(EXIT_PARSE, format!("{}\n{USAGE}", msg.into()))
}

fn number(flag: &str, s: Option<&String>) -> Result<u64, Failure> {
    let s = s.ok_or_else(|| usage_error(format!("{flag} needs a value")))?;
    let v = match s.strip_prefix("0x") {
        Some(h) => u64::from_str_radix(h, 16),
        None => s.parse(),
    };
    v.map_err(|_| usage_error(format!("{flag}: bad number `{s}`")))
}

fn range(flag: &str, s: Option<&String>) -> Result<RangeInclusive<u32>, Failure> {
    let s = s.ok_or_else(|| usage_error(format!("{flag} needs a range")))?;
    let parse = |t: &str| number(flag, Some(&t.to_string())).map(|v| v as u32);
    match s.split_once('-') {
        Some((a, b)) => Ok(parse(a)?..=parse(b)?),
        None => {
            let a = parse(s)?;
            Ok(a..=a)
        }
    }
}

pub fn parse_args(args: &[String]) -> Result<Option<Options>, Failure> {
    let mut o = Options {
        bit_f: 1,
        bit_t: 0,
        pattern_lo: None,
        compact: false,
        lut_base: 0,
        scratch: [20, 21, 22],
        adapter: "generic".into(),
        output: None,
        lint: false,
        dpl: false,
        verify: false,
        simulate: false,
        equivalence: false,
        registers: 32,
        memory: 1024,
        mem_range: None,
        reg_range: None,
        inputs: None,
        events: None,
        width: 8,
        max_steps: 10_000_000,
        strict: false,
        input: PathBuf::new(),
    };
    let mut input = None;
    let mut it = args.iter();
    while let Some(a) = it.next() {
        match a.as_str() {
            "-h" | "--help" => return Ok(None),
            "-bf" => o.bit_f = number(a, it.next())? as u32,
            "-bt" => o.bit_t = number(a, it.next())? as u32,
            "-po" => o.pattern_lo = Some(number(a, it.next())? as u32),
            "-cl" => o.compact = true,
            "-la" => o.lut_base = number(a, it.next())? as u32,
            "-r1" => o.scratch[0] = number(a, it.next())? as u8,
            "-r2" => o.scratch[1] = number(a, it.next())? as u8,
            "-r3" => o.scratch[2] = number(a, it.next())? as u8,
            "-a" => o.adapter = it.next().ok_or_else(|| usage_error("-a needs a name"))?.clone(),
            "-o" => o.output = Some(it.next().ok_or_else(|| usage_error("-o needs a file"))?.into()),
            "-l" => o.lint = true,
            "-d" => o.dpl = true,
            "-v" => o.verify = true,
            "-s" => o.simulate = true,
            "-e" => o.equivalence = true,
            "-r" => o.registers = number(a, it.next())? as usize,
            "-m" => o.memory = number(a, it.next())? as usize,
            "-M" => o.mem_range = Some(range(a, it.next())?),
            "-R" => o.reg_range = Some(range(a, it.next())?),
            "--inputs" => {
                let s = it.next().ok_or_else(|| usage_error("--inputs needs a value"))?;
                let h = s.trim_start_matches("0x");
                o.inputs = Some(u128::from_str_radix(h, 16).map_err(|_| usage_error(format!("--inputs: bad hex `{s}`")))?);
            }
            "--events" => o.events = Some(it.next().ok_or_else(|| usage_error("--events needs a file"))?.into()),
            "--width" => o.width = number(a, it.next())? as u32,
            "--max-steps" => o.max_steps = number(a, it.next())?,
            "--strict" => o.strict = true,
            s if s.starts_with('-') => return Err(usage_error(format!("unknown flag {s}"))),
            s => {
                if input.replace(PathBuf::from(s)).is_some() {
                    return Err(usage_error("more than one input file"));
                }
            }
        }
    }
    o.input = input.ok_or_else(|| usage_error("missing input file"))?;
    if o.bit_f == o.bit_t {
        return Err(usage_error("-bf and -bt must differ"));
    }
    if o.registers == 0 || o.memory == 0 {
        return Err(usage_error("-r and -m must be positive"));
    }
    if o.equivalence && !o.dpl {
        return Err(usage_error("-e needs -d"));
    }
    if o.lint && (o.dpl || o.verify || o.simulate || o.output.is_some()) {
        return Err(usage_error("-l only checks syntax; it cannot be combined with -d, -v, -s or -o"));
    }
    Ok(Some(o))
}

impl Options {
    pub fn dpl_config(&self) -> DplConfig {
        let mut cfg = DplConfig {
            lut_base: self.lut_base,
            compact: self.compact,
            scratch: self.scratch,
            word_width: self.width,
            strict: self.strict,
            ..DplConfig::default()
        }
        .with_rails(self.bit_f, self.bit_t);
        if let Some(po) = self.pattern_lo {
            cfg.pattern_lo = po;
        }
        cfg
    }

    pub fn machine(&self) -> MachineConfig {
        MachineConfig {
            word_width: self.width,
            registers: self.registers,
            memory: self.memory,
        }
    }
}

fn transform_json(r: &TransformReport) -> Value {
    let mut v = serde_json::to_value(r).expect("report serializes");
    if let Some(m) = v.as_object_mut() {
        m.insert(
            "luts".into(),
            r.luts.iter().map(|l| json!({"op": l.op, "base": l.base})).collect(),
        );
    }
    v
}

fn link(p: &Program) -> Result<LinkedProgram, Failure> {
    p.resolve().map_err(|e| Failure::new(EXIT_PARSE, e.to_string()))
}

struct Report {
    fields: Map<String, Value>,
}

impl Report {
    fn emit(&self) {
        println!("{}", Value::Object(self.fields.clone()));
    }

    fn fail(&mut self, stage: &str, code: u8, message: String) -> Failure {
        self.fields.insert(stage.into(), json!({"ok": false, "error": message}));
        self.emit();
        Failure::new(code, message)
    }
}

pub fn main(args: &[String]) -> Result<(), Failure> {
    let Some(o) = parse_args(args)? else {
        println!("{USAGE}");
        return Ok(());
    };
    let adapter = adapter_by_name(&o.adapter).ok_or_else(|| {
        let names: Vec<String> = adapters().iter().map(|a| a.name().to_string()).collect();
        usage_error(format!("unknown adapter `{}` (known: {})", o.adapter, names.join(", ")))
    })?;
    let mut report = Report { fields: Map::new() };
    report.fields.insert("input".into(), json!(o.input.display().to_string()));
    let source = std::fs::read_to_string(&o.input)
        .map_err(|e| Failure::new(EXIT_PARSE, format!("{}: {e}", o.input.display())))?;
    let program = match adapter.parse(&source) {
        Ok(p) => p,
        Err(e) => return Err(report.fail("parse", EXIT_PARSE, e.to_string())),
    };
    let original = match link(&program) {
        Ok(p) => p,
        Err(e) => return Err(report.fail("parse", EXIT_PARSE, e.message)),
    };
    report.fields.insert(
        "parse".into(),
        json!({
            "ok": true,
            "instructions": program.len(),
            "labels": program.labels().len(),
            "sensitive": program.sensitive_cells().len(),
            "outputs": program.output_cells().len(),
        }),
    );
    if o.lint {
        report.emit();
        return Ok(());
    }

    let mut current = program.clone();
    if o.dpl {
        match transform(&program, &o.dpl_config()) {
            Ok((t, r)) => {
                report.fields.insert("transform".into(), transform_json(&r));
                current = t;
            }
            Err(e) => return Err(report.fail("transform", EXIT_TRANSFORM, e.to_string())),
        }
    }
    if let Some(path) = &o.output {
        if let Err(e) = std::fs::write(path, adapter.print(&current)) {
            return Err(report.fail("output", EXIT_PARSE, format!("{}: {e}", path.display())));
        }
    }
    let linked = match link(&current) {
        Ok(p) => p,
        Err(e) => return Err(report.fail("transform", EXIT_TRANSFORM, e.message)),
    };
    let mc = o.machine();

    if o.equivalence {
        let map = DplStateMap::for_programs(&original, &linked);
        let v = check(&original, &linked, &map, &InputSpec::default(), 0, &mc, o.max_steps);
        let ok = v.passed();
        report.fields.insert(
            "equivalence".into(),
            json!({
                "ok": ok,
                "checked": v.checked,
                "exhaustive": v.exhaustive,
                "failures": v.failures.iter().take(5).collect::<Vec<_>>(),
                "failure_count": v.failures.len(),
            }),
        );
        if !ok {
            report.emit();
            return Err(Failure::new(EXIT_EQUIVALENCE, format!("{} of {} inputs differ", v.failures.len(), v.checked)));
        }
    }

    let mut verdict_failure = None;
    if o.verify {
        let r = verify_program(&linked, &mc, &VerifyOptions::default());
        let ok = r.verdict == Verdict::Balanced;
        report.fields.insert(
            "verify".into(),
            json!({
                "ok": ok,
                "verdict": r.verdict,
                "reason": r.reason,
                "finding_count": r.findings.len(),
                "findings": r.findings.iter().take(10).collect::<Vec<_>>(),
                "cycles": r.cycles,
                "max_set_size": r.max_set_size,
            }),
        );
        if !ok {
            verdict_failure = Some(Failure::new(EXIT_LEAK, format!("verification verdict: {:?}", r.verdict)));
        }
    }

    let mut dumps = Vec::new();
    if o.simulate {
        match simulate(&o, &linked, &mc, &mut dumps) {
            Ok(v) => {
                report.fields.insert("simulate".into(), v);
            }
            Err(e) => return Err(report.fail("simulate", EXIT_SIMULATE, e)),
        }
    }
    report.emit();
    for line in dumps {
        println!("{line}");
    }
    match verdict_failure {
        Some(f) => Err(f),
        None => Ok(()),
    }
}

fn simulate(o: &Options, p: &LinkedProgram, mc: &MachineConfig, dumps: &mut Vec<String>) -> Result<Value, String> {
    p.check_bounds(mc.registers, mc.memory, mc.word_width).map_err(|e| e.to_string())?;
    let fits = |l: &Loc| match l {
        Loc::Reg(r) => (*r as usize) < mc.registers,
        Loc::Mem(a) => (*a as usize) < mc.memory,
    };
    if let Some(l) = p.sensitive.iter().chain(&p.outputs).find(|l| !fits(l)) {
        return Err(format!("directive cell {l} out of range for the machine"));
    }
    let m = Machine::new(*mc);
    let enc = p.encoding.unwrap_or(Encoding::PLAIN);
    let mut st = m.initial_state();
    let bits = u128_bits(o.inputs.unwrap_or(0), p.sensitive.len());
    for (l, b) in p.sensitive.iter().zip(&bits) {
        st.set(*l, enc.encode(*b));
    }
    let r = m.run(p, st, o.max_steps).map_err(|e| e.to_string())?;
    if let Some(path) = &o.events {
        let f = std::fs::File::create(path).map_err(|e| format!("{}: {e}", path.display()))?;
        write_events_csv(&r.events, f).map_err(|e| e.to_string())?;
    }
    let decoded: Vec<Option<bool>> = p.outputs.iter().map(|l| enc.decode(r.final_state.get(*l))).collect();
    let poisoned: Vec<String> = p
        .outputs
        .iter()
        .zip(&decoded)
        .filter(|(_, d)| d.is_none())
        .map(|(l, _)| l.to_string())
        .collect();
    let out_bits: Vec<bool> = decoded.iter().map(|d| d.unwrap_or(false)).collect();
    if let Some(rg) = &o.mem_range {
        for a in rg.clone() {
            let v = r.final_state.memory.get(a as usize).ok_or(format!("memory cell @{a} out of range"))?;
            dumps.push(format!("{}: {v:#04x}", Loc::Mem(a)));
        }
    }
    if let Some(rg) = &o.reg_range {
        for n in rg.clone() {
            let v = r.final_state.registers.get(n as usize).ok_or(format!("register r{n} out of range"))?;
            dumps.push(format!("r{n}: {v:#04x}"));
        }
    }
    Ok(json!({
        "ok": true,
        "instructions": r.instruction_count,
        "events": r.events.len(),
        "inputs": bits_to_hex(&bits),
        "outputs": bits_to_hex(&out_bits),
        "poisoned": poisoned,
    }))
}
