use std::process::ExitCode;

use clap::Parser;
use offdec::cli::{exit_code, run, Cli, Status, EXIT_FAILED, EXIT_OK, EXIT_VALIDATION};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK } as u8);
        }
    };
    let mut stdout = std::io::stdout().lock();
    let code = match run(&cli, &mut stdout) {
        Ok(Status::Ok) => EXIT_OK,
        Ok(Status::Failed) => {
            eprintln!("error: checks failed");
            EXIT_FAILED
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}
