//! `cloudthin` — scan simulation, out-of-core subsampling, reference
//! subsamplers, and density analysis behind one binary.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/input error, 3 internal
//! invariant violation. Logs go to stderr; data goes to files only.

mod args;
mod commands;

use clap::Parser;
use cloudthin::Error;

fn main() {
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();

    let cli = match args::Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return code;
        }
    };

    match std::panic::catch_unwind(|| commands::run(cli.command)) {
        Ok(Ok(())) => 0,
        Ok(Err(err)) => {
            eprintln!("error: {err}");
            exit_code(&err)
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            eprintln!("error: internal invariant violated: {msg}");
            3
        }
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 1,
        Error::Internal(_) => 3,
        _ => 2,
    }
}
