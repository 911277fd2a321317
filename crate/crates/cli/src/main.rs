use std::process::ExitCode;

use clap::Parser;
use tangled_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) => {
            println!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("tangled: {msg}");
            ExitCode::FAILURE
        }
    }
}
