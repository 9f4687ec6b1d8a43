use std::process::ExitCode;

fn main() -> ExitCode {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    genplanner::cli::main_with(std::env::args_os())
}
