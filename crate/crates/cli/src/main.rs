use clap::Parser;
use gfm_cli::{execute, Cli};

fn main() {
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(dir) => println!("{}", dir.display()),
        Err(e) => {
            eprintln!("gfm: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
