use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = biasprobe_cli::Cli::parse();
    match biasprobe_cli::execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
