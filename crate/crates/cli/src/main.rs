use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;

use clap::Parser;
use fsaf_cli::args::Cli;

const INTERNAL: u8 = 5;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("FSAG_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            // only fails if a pool already exists, which cannot happen here
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    match catch_unwind(AssertUnwindSafe(|| fsaf_cli::run(&cli))) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error code={} kind={}: {msg}", e.exit_code(), e.kind());
            ExitCode::from(e.exit_code() as u8)
        }
        Err(_) => {
            eprintln!("error code={INTERNAL} kind=internal: unexpected panic");
            ExitCode::from(INTERNAL)
        }
    }
}
