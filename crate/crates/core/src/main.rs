use std::process::ExitCode;

fn main() -> ExitCode {
    cascade_seg::cli::main_with_args(std::env::args_os())
}
