#![allow(dead_code)]

use proptest::prelude::*;

/// Sensitive inputs r4..r7; temporaries and outputs r8..r13; r14 is a
/// public zero used to precharge moves.
pub const HEADER: &str = ";@sensitive r4..r7\n;@output r8..r13\nmov r14 #0 ;@public\n";

fn reg() -> impl Strategy<Value = u8> {
    4u8..14
}

fn dest() -> impl Strategy<Value = u8> {
    8u8..14
}

pub fn gate() -> impl Strategy<Value = String> {
    prop_oneof![
        (prop::sample::select(vec!["and", "orr", "xor"]), dest(), reg(), reg())
            .prop_map(|(op, d, a, b)| format!("{op} r{d} r{a} r{b}")),
        (dest(), reg()).prop_map(|(d, a)| format!("not r{d} r{a}")),
        (dest(), reg())
            .prop_filter("self move", |(d, a)| d != a)
            .prop_map(|(d, a)| format!("mov r{d} r14\nmov r{d} r{a}")),
        (dest(), prop::bool::ANY).prop_map(|(d, b)| format!("mov r{d} r14\nmov r{d} #{}", b as u8)),
        (dest(), reg()).prop_map(|(d, a)| format!("xor r{d} r{a} #1")),
    ]
}

/// Straight-line bitsliced body that uses every table.
pub fn body() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(gate(), 1..12).prop_map(|mut v| {
        let mut head: Vec<String> = (11..14).map(|r| format!("mov r{r} #0")).collect();
        head.push("and r8 r4 r5".into());
        head.push("orr r9 r5 r6".into());
        head.push("xor r10 r6 r7".into());
        head.append(&mut v);
        head
    })
}

pub fn source(lines: &[String]) -> String {
    let mut s = String::from(HEADER);
    for l in lines {
        s.push_str(l);
        s.push('\n');
    }
    s
}
