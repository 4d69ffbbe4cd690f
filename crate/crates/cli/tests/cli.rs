use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const GATES: &str = ";@sensitive r4..r7
;@output r8..r10
and r8 r4 r5
xor r9 r6 r7
orr r10 r8 r9
";

fn dplc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dplc")).args(args).output().expect("binary runs")
}

fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn report(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    let first = text.lines().next().expect("a report line");
    serde_json::from_str(first).expect("valid JSON report")
}

#[test]
fn lint_only() {
    let d = TempDir::new().unwrap();
    let f = write(&d, "g.asm", GATES);
    let out = dplc(&["-l", s(&f)]);
    assert_eq!(out.status.code(), Some(0));
    let r = report(&out);
    assert_eq!(r["parse"]["ok"], true);
    assert_eq!(r["parse"]["instructions"], 3);
    assert!(r.get("transform").is_none());
}

#[test]
fn exit_codes() {
    let d = TempDir::new().unwrap();
    let good = write(&d, "g.asm", GATES);
    let bad = write(&d, "bad.asm", "frob r1 r2\n");
    let label = write(&d, "l.asm", "jmp nowhere\n");
    let lit = write(&d, "lit.asm", ";@sensitive r4\nmov r5 #7\nand r6 r5 r4\n");
    let far = write(&d, "far.asm", "mov r1 @2000\n");
    let far_dir = write(&d, "fd.asm", ";@sensitive @5000\nmov r1 #0\n");
    let cases: Vec<(Vec<&str>, i32)> = vec![
        (vec![s(&good)], 0),
        (vec!["-d", "-v", "-s", "-e", s(&good)], 0),
        (vec![s(&bad)], 1),
        (vec![s(&label)], 1),
        (vec!["-x", s(&good)], 1),
        (vec![], 1),
        (vec!["-d", "-bf", "1", "-bt", "1", s(&good)], 1),
        (vec!["-e", s(&good)], 1),
        (vec!["-d", s(&lit)], 2),
        (vec!["-d", "-la", "8", s(&good)], 2),
        (vec!["-d", "-bf", "9", s(&good)], 2),
        (vec!["-v", s(&good)], 3),
        (vec!["-s", s(&far)], 4),
        (vec!["-s", "-m", "4", s(&far)], 4),
        (vec!["-s", s(&far_dir)], 4),
    ];
    for (args, code) in cases {
        let out = dplc(&args);
        assert_eq!(out.status.code(), Some(code), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        if code != 0 {
            assert!(!out.stderr.is_empty(), "{args:?} explains itself");
        }
    }
}

#[test]
fn reports_are_json() {
    let d = TempDir::new().unwrap();
    let f = write(&d, "g.asm", GATES);
    let out = dplc(&["-d", "-v", "-s", "-e", s(&f)]);
    let r = report(&out);
    assert_eq!(r["verify"]["verdict"], "balanced");
    assert_eq!(r["equivalence"]["exhaustive"], true);
    assert_eq!(r["equivalence"]["checked"], 16);
    assert_eq!(r["transform"]["expanded_count"], 3);
    assert_eq!(r["transform"]["luts"].as_array().unwrap().len(), 3);
    let plain = report(&dplc(&["-v", s(&f)]));
    assert_eq!(plain["verify"]["verdict"], "leaky");
    assert!(plain["verify"]["finding_count"].as_u64().unwrap() > 0);
}

#[test]
fn staged_verification_matches_combined() {
    let d = TempDir::new().unwrap();
    let f = write(&d, "g.asm", GATES);
    let o = d.path().join("o.asm");
    let combined = report(&dplc(&["-d", "-v", s(&f)]));
    let staged = dplc(&["-d", "-o", s(&o), s(&f)]);
    assert_eq!(staged.status.code(), Some(0));
    let after = report(&dplc(&["-v", s(&o)]));
    assert_eq!(after["verify"], combined["verify"]);
    let relint = dplc(&["-l", s(&o)]);
    assert_eq!(relint.status.code(), Some(0));
}

#[test]
fn avr_style_transform() {
    let d = TempDir::new().unwrap();
    let f = write(&d, "g.asm", GATES);
    let o = d.path().join("out.asm");
    let out = dplc(&["-d", "-bf", "2", "-bt", "1", "-po", "1", "-cl", "-e", "-o", s(&o), s(&f)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(&out);
    assert_eq!(r["transform"]["layout"]["encoding"]["one"], 2);
    assert_eq!(r["transform"]["layout"]["encoding"]["zero"], 4);
    assert_eq!(r["equivalence"]["ok"], true);
    let text = std::fs::read_to_string(&o).unwrap();
    assert!(text.contains(";@encoding"));
    let v = report(&dplc(&["-v", s(&o)]));
    assert_eq!(v["verify"]["verdict"], "balanced");
}

#[test]
fn simulation_dumps() {
    let d = TempDir::new().unwrap();
    let f = write(&d, "g.asm", GATES);
    let ev = d.path().join("events.csv");
    // r4=1 r5=1 r6=0 r7=1: r8=1, r9=1, r10=1
    let out = dplc(&["-s", "--inputs", "b", "-R", "8-10", "-M", "0", "--events", s(&ev), s(&f)]);
    assert_eq!(out.status.code(), Some(0));
    let r = report(&out);
    assert_eq!(r["simulate"]["outputs"], "7");
    let text = String::from_utf8(out.stdout).unwrap();
    let dumps: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(dumps, ["@0: 0x00", "r8: 0x01", "r9: 0x01", "r10: 0x01"]);
    let events = std::fs::read_to_string(&ev).unwrap();
    assert!(events.lines().count() > 3);

    let enc = dplc(&["-d", "-s", "--inputs", "b", "-R", "8-10", s(&f)]);
    let text = String::from_utf8(enc.stdout).unwrap();
    let dumps: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(dumps, ["r8: 0x01", "r9: 0x01", "r10: 0x01"]);
    let enc0 = dplc(&["-d", "-s", "-R", "8", s(&f)]);
    assert_eq!(String::from_utf8(enc0.stdout).unwrap().lines().nth(1), Some("r8: 0x02"));
}

#[test]
fn help_and_adapter() {
    let out = dplc(&["-h"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("-bf"));
    let d = TempDir::new().unwrap();
    let f = write(&d, "g.asm", GATES);
    let out = dplc(&["-a", "nope", s(&f)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn corpus_and_lab_smoke() {
    let d = TempDir::new().unwrap();
    let dir = d.path();
    assert_eq!(dplc(&["corpus", "--out", s(dir)]).status.code(), Some(0));
    let asm = dir.join("present80.asm");
    assert!(std::fs::read_to_string(dir.join("present80_vectors.csv")).unwrap().starts_with("plaintext,key,ciphertext"));
    let printed = dplc(&["corpus"]);
    assert_eq!(printed.stdout, std::fs::read(&asm).unwrap());

    let traces = dir.join("p.bin");
    let out = dplc(&["lab", "traces", s(&asm), "--n", "500", "--window", "narrow", "--out", s(&traces)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let meta: Value = serde_json::from_slice(&out.stdout).unwrap();
    let start = meta["window_start"].as_u64().unwrap();
    let cycles = meta["cycles"].as_u64().unwrap();

    let nicv_csv = dir.join("nicv.csv");
    let out = dplc(&["lab", "nicv", s(&traces), "--csv", s(&nicv_csv)]);
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    let peak = r["max"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&peak));
    let rows = std::fs::read_to_string(&nicv_csv).unwrap();
    assert_eq!(rows.lines().count() as u64, cycles + 1);
    assert!(rows.lines().nth(1).unwrap().starts_with(&format!("{start},")));

    let out = dplc(&["lab", "cpa", s(&traces)]);
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["true_guess"], 15);
    assert_eq!(r["peaks"].as_array().unwrap().len(), 16);

    let curve = dir.join("curve.csv");
    let out = dplc(&[
        "lab", "success-rate", s(&asm), "--window", "narrow", "--grid", "20,40", "--attacks", "5", "--out", s(&curve),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = std::fs::read_to_string(&curve).unwrap();
    assert_eq!(rows.lines().next(), Some("n_traces,success_rate"));
    assert_eq!(rows.lines().count(), 3);

    let out = dplc(&["lab", "profile", s(&asm), "--window", "narrow", "--n", "50"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["scores"].as_array().unwrap().len(), 8);

    assert_eq!(dplc(&["lab", "bogus"]).status.code(), Some(1));
    assert_eq!(dplc(&["lab", "cpa", s(&dir.join("missing"))]).status.code(), Some(1));
}
