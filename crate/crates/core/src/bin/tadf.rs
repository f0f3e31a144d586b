use std::io;
use std::process::ExitCode;

fn main() -> ExitCode {
    let env: Vec<(String, String)> = std::env::vars().collect();
    let code = tadf::cli::main_with(std::env::args_os(), &env, &mut io::stdout().lock(), &mut io::stderr().lock());
    ExitCode::from(code as u8)
}
