use std::process::ExitCode;

fn main() -> ExitCode {
    ddiss::main_with_args(std::env::args_os()).into()
}
