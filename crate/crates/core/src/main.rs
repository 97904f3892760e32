use std::panic;
use std::process::ExitCode;

use icl_lens::cli::{run, EXIT_INTERNAL};

fn main() -> ExitCode {
    let code = panic::catch_unwind(|| run(std::env::args_os())).unwrap_or(EXIT_INTERNAL);
    ExitCode::from(code as u8)
}
