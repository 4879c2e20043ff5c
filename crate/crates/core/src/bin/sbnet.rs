use std::process::ExitCode;

use sbnet::cli;

fn main() -> ExitCode {
    let threads = std::env::var(cli::THREADS_ENV).ok();
    if let Err(e) = cli::init_threads(threads.as_deref()) {
        eprintln!("error: {e}");
        return ExitCode::from(cli::exit_code(&e) as u8);
    }
    let code = cli::dispatch(std::env::args_os(), &mut std::io::stdout(), &mut std::io::stderr());
    ExitCode::from(code as u8)
}
