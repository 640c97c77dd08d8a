use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(kep_cli::run(std::env::args_os()))
}
