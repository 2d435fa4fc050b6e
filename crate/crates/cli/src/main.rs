use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = hhir_cli::Cli::parse();
    if let Err(e) = hhir_cli::run(cli) {
        eprintln!("hhir: {e}");
        std::process::exit(e.exit_code());
    }
}
