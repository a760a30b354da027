use clap::Parser;

fn main() {
    let cli = voxmamba::cli::Cli::parse();
    if let Err(e) = voxmamba::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
