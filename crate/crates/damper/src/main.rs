use std::process::ExitCode;

fn main() -> ExitCode {
    damper::cli::run_cli(std::env::args_os(), &mut std::io::stdout(), &mut std::io::stderr())
}
