use clap::Parser;
use phenoquant::cli::{exit_code, run, Cli};

fn main() {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli, &argv) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
