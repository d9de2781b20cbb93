use clap::Parser;

fn main() {
    let cli = effdid_cli::Cli::parse();
    std::process::exit(effdid_cli::run(cli));
}
