use std::process::ExitCode;

use clap::Parser;
use tilefuse_cli::{run, Cli, Outcome};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut stdout = std::io::stdout().lock();
    match run(&cli, &mut stdout) {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::Fail) => ExitCode::from(1),
        Err(e) => {
            eprintln!("tilefuse: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
