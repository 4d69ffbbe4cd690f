//! Syntax adapters translate external assembly dialects to and from the
//! generic language.

use super::{parse, parse::parse_line, Opcode, ParseError, ParseErrorKind, Program};

pub trait SyntaxAdapter: Send + Sync {
    fn name(&self) -> &str;
    fn parse(&self, source: &str) -> Result<Program, ParseError>;
    fn print(&self, program: &Program) -> String;
}

/// The native syntax.
#[derive(Debug, Default, Clone, Copy)]
pub struct GenericAdapter;

impl SyntaxAdapter for GenericAdapter {
    fn name(&self) -> &str {
        "generic"
    }

    fn parse(&self, source: &str) -> Result<Program, ParseError> {
        parse(source)
    }

    fn print(&self, program: &Program) -> String {
        program.print()
    }
}

/// AVR-flavoured mnemonics over the generic operand syntax. Only the
/// spelling changes; semantics are the generic ones.
#[derive(Debug, Default, Clone, Copy)]
pub struct AvrLikeAdapter;

const AVR_SPELLINGS: [(&str, Opcode); 13] = [
    ("nop", Opcode::Nop),
    ("rjmp", Opcode::Jmp),
    ("com", Opcode::Not),
    ("mov", Opcode::Mov),
    ("and", Opcode::And),
    ("or", Opcode::Orr),
    ("eor", Opcode::Xor),
    ("lsl", Opcode::Lsl),
    ("lsr", Opcode::Lsr),
    ("add", Opcode::Add),
    ("mul", Opcode::Mul),
    ("breq", Opcode::Beq),
    ("brne", Opcode::Bne),
];

fn avr_to_generic(word: &str) -> Option<&'static str> {
    AVR_SPELLINGS
        .iter()
        .find(|(w, _)| *w == word)
        .map(|(_, op)| op.mnemonic())
}

fn generic_to_avr(op: Opcode) -> &'static str {
    AVR_SPELLINGS
        .iter()
        .find(|(_, o)| *o == op)
        .map(|(w, _)| *w)
        .expect("every opcode has an avr spelling")
}

/// Replaces the mnemonic of one source line, leaving label, operands and
/// comment untouched. On an unknown mnemonic returns its 1-based column.
fn respell(raw: &str, map: impl Fn(&str) -> Option<&'static str>) -> Result<String, (usize, String)> {
    let code = &raw[..raw.find(';').unwrap_or(raw.len())];
    let bytes = code.as_bytes();
    let skip_ws = |mut p: usize| {
        while p < bytes.len() && bytes[p].is_ascii_whitespace() {
            p += 1;
        }
        p
    };
    let word_end = |mut p: usize| {
        while p < bytes.len() && !bytes[p].is_ascii_whitespace() {
            p += 1;
        }
        p
    };
    let mut pos = skip_ws(0);
    let mut end = word_end(pos);
    if let Some(colon) = code[pos..end].find(':') {
        pos = skip_ws(pos + colon + 1);
        end = word_end(pos);
    }
    if pos >= end {
        return Ok(raw.to_string());
    }
    let word = &code[pos..end];
    let mnemonic = map(word).ok_or_else(|| (pos + 1, word.to_string()))?;
    Ok(format!("{}{}{}", &raw[..pos], mnemonic, &raw[end..]))
}

impl SyntaxAdapter for AvrLikeAdapter {
    fn name(&self) -> &str {
        "avr-like"
    }

    fn parse(&self, source: &str) -> Result<Program, ParseError> {
        let mut lines = Vec::new();
        for (n, raw) in source.lines().enumerate() {
            let generic = respell(raw, avr_to_generic).map_err(|(column, word)| ParseError {
                line: n + 1,
                column,
                kind: ParseErrorKind::UnknownOpcode(word),
            })?;
            lines.push(parse_line(&generic, n + 1)?);
        }
        Program::from_lines(lines)
    }

    fn print(&self, program: &Program) -> String {
        let mut s = String::new();
        for line in program.lines() {
            let text = line.to_string();
            match &line.inst {
                Some(inst) => {
                    let op = inst.opcode();
                    s.push_str(&respell(&text, |_| Some(generic_to_avr(op))).unwrap_or(text));
                }
                None => s.push_str(&text),
            }
            s.push('\n');
        }
        s
    }
}

/// Built-in adapters, generic first.
pub fn adapters() -> Vec<Box<dyn SyntaxAdapter>> {
    vec![Box::new(GenericAdapter), Box::new(AvrLikeAdapter)]
}

pub fn adapter_by_name(name: &str) -> Option<Box<dyn SyntaxAdapter>> {
    adapters().into_iter().find(|a| a.name() == name)
}
