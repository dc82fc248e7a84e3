use std::process::ExitCode;

fn main() -> ExitCode {
    robust_value_cli::main_with_args(std::env::args_os())
}
