use std::sync::atomic::{AtomicBool, Ordering};

use clap::Parser;
use groundconv_cli::{run_cli, Cli, EXIT_OK, EXIT_USAGE};

static CANCEL: AtomicBool = AtomicBool::new(false);

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            std::process::exit(if e.use_stderr() { EXIT_USAGE } else { EXIT_OK });
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    // First Ctrl-C drains in-flight work; a second one aborts.
    let installed = ctrlc::set_handler(|| {
        if CANCEL.swap(true, Ordering::SeqCst) {
            std::process::exit(130);
        }
        eprintln!("interrupt received; finishing in-flight conversations");
    });
    if let Err(e) = installed {
        log::warn!("could not install Ctrl-C handler: {e}");
    }
    std::process::exit(run_cli(cli, &CANCEL));
}
