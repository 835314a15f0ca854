use std::process::ExitCode;

use clap::Parser;
use htp_cli::{error_line, exit_code, run, Cli};
use htp_core::{Error, Execution};

fn configure_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var("HTP_NUM_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw.trim().parse().ok().filter(|&t| t > 0).ok_or_else(|| {
        Error::InvalidConfig(format!("HTP_NUM_THREADS={raw:?} is not a positive integer"))
    })?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let reason = e.kind().to_string();
            eprint!("{}", e.render());
            eprintln!(
                "{}",
                error_line(&Error::InvalidConfig(format!("arguments: {reason}")))
            );
            return ExitCode::from(1);
        }
    };
    match configure_threads().and_then(|()| run(&cli, Execution::default())) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
