use clap::Parser;

fn main() {
    let cli = strata_cli::Cli::parse();
    if let Err(e) = strata_cli::run(cli, &mut std::io::stdout().lock()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
