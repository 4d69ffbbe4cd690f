use super::{
    BinaryOp, Cond, Directive, Encoding, IndBase, Instruction, Line, Loc, Opcode, Operand,
    ParseError, ParseErrorKind, Program, Target, UnaryOp,
};

/// Parses source text in the generic syntax.
pub fn parse(source: &str) -> Result<Program, ParseError> {
    let mut lines = Vec::new();
    for (n, raw) in source.lines().enumerate() {
        lines.push(parse_line(raw, n + 1)?);
    }
    Program::from_lines(lines)
}

struct Token<'a> {
    text: &'a str,
    column: usize,
}

fn tokenize(code: &str) -> Vec<Token<'_>> {
    let mut out: Vec<Token<'_>> = Vec::new();
    let mut start = None;
    for (i, c) in code.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                out.push(Token {
                    text: &code[s..i],
                    column: s + 1,
                });
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push(Token {
            text: &code[s..],
            column: s + 1,
        });
    }
    // `!r1, 16` is accepted as `!r1,16`
    let mut merged: Vec<Token<'_>> = Vec::with_capacity(out.len());
    let mut iter = out.into_iter().peekable();
    while let Some(t) = iter.next() {
        if t.text.ends_with(',') {
            if let Some(next) = iter.next() {
                let end = next.column - 1 + next.text.len();
                merged.push(Token {
                    text: &code[t.column - 1..end],
                    column: t.column,
                });
                continue;
            }
        }
        merged.push(t);
    }
    merged
}

pub(crate) fn parse_line(raw: &str, line_no: usize) -> Result<Line, ParseError> {
    let err = |column: usize, kind: ParseErrorKind| ParseError {
        line: line_no,
        column,
        kind,
    };
    let (code, comment) = match raw.find(';') {
        Some(i) => (&raw[..i], Some(raw[i + 1..].trim().to_string())),
        None => (raw, None),
    };
    let mut tokens = tokenize(code);
    let mut label = None;
    if let Some(first) = tokens.first() {
        if let Some(colon) = first.text.find(':') {
            let name = &first.text[..colon];
            if !is_label_name(name) {
                return Err(err(first.column, ParseErrorKind::BadLabel(name.to_string())));
            }
            label = Some(name.to_string());
            let rest = &first.text[colon + 1..];
            let column = first.column + colon + 1;
            if rest.is_empty() {
                tokens.remove(0);
            } else {
                tokens[0] = Token { text: rest, column };
            }
        }
    }
    let inst = if tokens.is_empty() {
        None
    } else {
        Some(parse_instruction(&tokens).map_err(|(col, kind)| err(col, kind))?)
    };
    Ok(Line {
        label,
        inst,
        comment,
    })
}

fn parse_instruction(tokens: &[Token<'_>]) -> Result<Instruction, (usize, ParseErrorKind)> {
    let head = &tokens[0];
    let opcode = Opcode::from_mnemonic(head.text)
        .ok_or_else(|| (head.column, ParseErrorKind::UnknownOpcode(head.text.to_string())))?;
    let args = &tokens[1..];
    let expected = match opcode {
        Opcode::Nop => 0,
        Opcode::Jmp => 1,
        Opcode::Not | Opcode::Mov => 2,
        _ => 3,
    };
    if args.len() != expected {
        let column = args.get(expected).map_or(head.column, |t| t.column);
        return Err((
            column,
            ParseErrorKind::Arity {
                opcode,
                expected,
                found: args.len(),
            },
        ));
    }
    let val = |t: &Token<'_>| parse_operand(t.text).ok_or_else(|| (t.column, ParseErrorKind::BadOperand(t.text.to_string())));
    let lval = |t: &Token<'_>| {
        let op = val(t)?;
        if op.is_lval() {
            Ok(op)
        } else {
            Err((t.column, ParseErrorKind::ImmediateDestination(t.text.to_string())))
        }
    };
    let addr = |t: &Token<'_>| parse_target(t.text).ok_or_else(|| (t.column, ParseErrorKind::BadLabel(t.text.to_string())));
    Ok(match opcode {
        Opcode::Nop => Instruction::Nop,
        Opcode::Jmp => Instruction::Jmp(addr(&args[0])?),
        Opcode::Not | Opcode::Mov => Instruction::Unary {
            op: if opcode == Opcode::Not {
                UnaryOp::Not
            } else {
                UnaryOp::Mov
            },
            dst: lval(&args[0])?,
            src: val(&args[1])?,
        },
        Opcode::Beq | Opcode::Bne => Instruction::Branch {
            cond: if opcode == Opcode::Beq { Cond::Eq } else { Cond::Ne },
            lhs: val(&args[0])?,
            rhs: val(&args[1])?,
            target: addr(&args[2])?,
        },
        _ => Instruction::Binary {
            op: match opcode {
                Opcode::And => BinaryOp::And,
                Opcode::Orr => BinaryOp::Orr,
                Opcode::Xor => BinaryOp::Xor,
                Opcode::Lsl => BinaryOp::Lsl,
                Opcode::Lsr => BinaryOp::Lsr,
                Opcode::Add => BinaryOp::Add,
                _ => BinaryOp::Mul,
            },
            dst: lval(&args[0])?,
            lhs: val(&args[1])?,
            rhs: val(&args[2])?,
        },
    })
}

pub(crate) fn parse_number(s: &str) -> Option<i64> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, s),
    };
    let v = if let Some(h) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        i64::from_str_radix(h, 16).ok()?
    } else if let Some(b) = body.strip_prefix("0b") {
        i64::from_str_radix(b, 2).ok()?
    } else {
        if body.is_empty() || !body.bytes().all(|c| c.is_ascii_digit()) {
            return None;
        }
        body.parse::<i64>().ok()?
    };
    Some(if neg { -v } else { v })
}

fn parse_unsigned<T: TryFrom<i64>>(s: &str) -> Option<T> {
    let v = parse_number(s)?;
    if v < 0 {
        return None;
    }
    T::try_from(v).ok()
}

pub(crate) fn parse_operand(s: &str) -> Option<Operand> {
    if let Some(rest) = s.strip_prefix('r') {
        return parse_unsigned::<u8>(rest).map(Operand::Reg);
    }
    if let Some(rest) = s.strip_prefix('#') {
        return parse_unsigned::<u32>(rest).map(Operand::Imm);
    }
    if let Some(rest) = s.strip_prefix('@') {
        return parse_unsigned::<u32>(rest).map(Operand::Mem);
    }
    if let Some(rest) = s.strip_prefix('!') {
        let (base, offset) = match rest.split_once(',') {
            Some((b, o)) => (b, i32::try_from(parse_number(o.trim_start())?).ok()?),
            None => (rest, 0),
        };
        let base = match parse_operand(base)? {
            Operand::Reg(r) => IndBase::Reg(r),
            Operand::Imm(v) => IndBase::Imm(v),
            _ => return None,
        };
        return Some(Operand::Ind { base, offset });
    }
    None
}

fn parse_target(s: &str) -> Option<Target> {
    if let Some(rest) = s.strip_prefix('#') {
        return parse_unsigned::<usize>(rest).map(Target::Abs);
    }
    is_label_name(s).then(|| Target::Label(s.to_string()))
}

pub(crate) fn is_label_name(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn parse_loc(s: &str) -> Option<Loc> {
    match parse_operand(s)? {
        Operand::Reg(r) => Some(Loc::Reg(r)),
        Operand::Mem(a) => Some(Loc::Mem(a)),
        _ => None,
    }
}

/// `r1`, `@5`, or an inclusive range `@256..@319` / `r1..r4`.
fn parse_locs(s: &str) -> Option<Vec<Loc>> {
    match s.split_once("..") {
        None => parse_loc(s).map(|l| vec![l]),
        Some((a, b)) => match (parse_loc(a)?, parse_loc(b)?) {
            (Loc::Mem(x), Loc::Mem(y)) if x <= y => Some((x..=y).map(Loc::Mem).collect()),
            (Loc::Reg(x), Loc::Reg(y)) if x <= y => Some((x..=y).map(Loc::Reg).collect()),
            _ => None,
        },
    }
}

/// Interprets a comment. Returns `Ok(None)` for ordinary comments.
pub(crate) fn parse_directive(comment: &str) -> Result<Option<Directive>, ParseErrorKind> {
    let Some(body) = comment.strip_prefix('@') else {
        return Ok(None);
    };
    let bad = || ParseErrorKind::BadDirective(comment.to_string());
    let mut words = body.split_whitespace();
    let name = words.next().ok_or_else(bad)?;
    let rest: Vec<&str> = words.collect();
    let locs = |rest: &[&str]| -> Result<Vec<Loc>, ParseErrorKind> {
        if rest.is_empty() {
            return Err(bad());
        }
        let mut v = Vec::new();
        for w in rest {
            v.extend(parse_locs(w).ok_or_else(bad)?);
        }
        Ok(v)
    };
    Ok(Some(match name {
        "sensitive" => Directive::Sensitive(locs(&rest)?),
        "output" => Directive::Output(locs(&rest)?),
        "public" if rest.is_empty() => Directive::Public,
        "prologue" if rest.is_empty() => Directive::Prologue,
        "encoding" => {
            let mut zero = None;
            let mut one = None;
            for w in &rest {
                let (k, v) = w.split_once('=').ok_or_else(bad)?;
                let v = parse_unsigned::<u32>(v).ok_or_else(bad)?;
                match k {
                    "zero" => zero = Some(v),
                    "one" => one = Some(v),
                    _ => return Err(bad()),
                }
            }
            match (zero, one) {
                (Some(zero), Some(one)) if zero != one => Directive::Encoding(Encoding { zero, one }),
                _ => return Err(bad()),
            }
        }
        _ => return Err(bad()),
    }))
}
