use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(diffquant::harness::cli::run(std::env::args()) as u8)
}
