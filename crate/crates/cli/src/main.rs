mod lab;
mod pipeline;

use std::process::ExitCode;

/// Error carrying the process exit code of the stage that failed.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Failure {
        Failure {
            code,
            message: message.into(),
        }
    }
}

pub const EXIT_PARSE: u8 = 1;
pub const EXIT_TRANSFORM: u8 = 2;
pub const EXIT_LEAK: u8 = 3;
pub const EXIT_SIMULATE: u8 = 4;
pub const EXIT_EQUIVALENCE: u8 = 5;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let result = match args.get(1).map(String::as_str) {
        Some("lab") | Some("corpus") => lab::main(&args),
        _ => pipeline::main(&args[1..]),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if !f.message.is_empty() {
                eprintln!("dplc: {}", f.message);
            }
            ExitCode::from(f.code)
        }
    }
}
