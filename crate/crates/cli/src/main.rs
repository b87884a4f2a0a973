//! `atsg`: data generation, training, inference, evaluation and experiment
//! runs for the patch-transformer segmenter.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure (NaN, divergence, failed gradient check).

mod commands;

use std::process::ExitCode;

use clap::Parser;

use commands::Cli;

fn init_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("ATSG_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| atsg_core::Error::Config(format!("ATSG_THREADS must be a non-negative integer, got {raw:?}")))?;
    // 0 leaves the worker count to rayon.
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| atsg_core::Error::Config(format!("cannot configure thread pool: {e}")))?;
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<atsg_core::Error>()) {
        Some(e) if e.is_numeric() => 3,
        Some(e) if e.is_data() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = init_threads().and_then(|_| commands::run(cli));
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
