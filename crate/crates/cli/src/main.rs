use std::process::ExitCode;

use clap::Parser;
use microgrid_cli::{execute, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let out = match execute(&cli) {
        Ok(out) => out,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    for (path, bytes) in &out.files {
        if let Err(e) = std::fs::write(path, bytes) {
            eprintln!("error: cannot write {}: {e}", path.display());
            return ExitCode::from(1);
        }
    }
    print!("{}", out.stdout);
    match out.failure {
        Some(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code() as u8)
        }
        None => ExitCode::SUCCESS,
    }
}
