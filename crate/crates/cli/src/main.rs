use std::process::ExitCode;

use clap::Parser;
use ringscft_cli::{execute, Cli, Command, EXIT_INPUT};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let Command::Run(args) = cli.command;
    let result = args.resolve().and_then(|cfg| execute(&cfg));
    match result {
        Ok(outcome) => {
            for r in &outcome.runs {
                println!(
                    "beta={} energy={:.10} converged={} iterations={} -> {}",
                    r.beta,
                    r.energy,
                    r.converged,
                    r.iterations,
                    r.dir.display()
                );
            }
            ExitCode::from(outcome.exit_code())
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
