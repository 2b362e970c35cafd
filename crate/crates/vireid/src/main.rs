use clap::Parser;

fn main() {
    let cli = vireid::cli::Cli::parse();
    if let Err(e) = vireid::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
