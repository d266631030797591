use clap::Parser;

fn main() {
    let cli = blockflow_cli::cli::Cli::parse();
    std::process::exit(blockflow_cli::cli::main_with(&cli));
}
