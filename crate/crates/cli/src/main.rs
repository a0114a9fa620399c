use clap::Parser;

fn main() {
    let cli = stackdrive_cli::Cli::parse();
    if let Err(e) = stackdrive_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
