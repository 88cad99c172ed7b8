use clap::Parser;
use region_dit_cli::{run, Cli};
use region_dit_core::prompts::UreqTransport;

fn main() {
    let cli = Cli::parse();
    match run(&cli, &UreqTransport) {
        Ok(stdout) => println!("{stdout}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
