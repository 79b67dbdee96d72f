use clap::Parser;

fn main() {
    let cli = aldsgd::cli::Cli::parse();
    std::process::exit(aldsgd::cli::run(cli));
}
