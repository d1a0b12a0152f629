use clap::Parser;

fn main() {
    let cli = contraseg::cli::Cli::parse();
    if let Err(e) = contraseg::cli::run(cli) {
        eprintln!("{e}");
        std::process::exit(e.exit_code() as i32);
    }
}
