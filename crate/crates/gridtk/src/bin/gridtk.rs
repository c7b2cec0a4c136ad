use clap::Parser;

fn main() {
    let cli = gridtk::cli::Cli::parse();
    std::process::exit(gridtk::cli::run(&cli));
}
