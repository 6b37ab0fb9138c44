use clap::Parser;
use phm_cli::{exit_code, run, threads_from_env, Cli, EXIT_INPUT};

fn main() {
    let cli = Cli::parse();
    let threads = match threads_from_env(std::env::var("PHM_THREADS").ok().as_deref()) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(EXIT_INPUT);
        }
    };
    if let Err(e) = run(cli, threads) {
        eprintln!("error: {e:#}");
        std::process::exit(exit_code(&e));
    }
}
