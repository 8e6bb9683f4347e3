use std::process::ExitCode;

fn main() -> ExitCode {
    risknet::cli::run()
}
