use clap::Parser;

fn main() {
    let cli = sheaf_dmfl::cli::Cli::parse();
    std::process::exit(sheaf_dmfl::cli::main_with(cli));
}
