use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(eclip::cli::run())
}
