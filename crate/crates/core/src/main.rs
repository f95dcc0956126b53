use clap::Parser;

fn main() {
    let cli = cecr::cli::Cli::parse();
    let code = cecr::cli::run(&cli, &mut std::io::stdout().lock());
    std::process::exit(code);
}
