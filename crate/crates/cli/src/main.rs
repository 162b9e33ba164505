use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = tokentrack_cli::Cli::parse();
    if let Err(e) = tokentrack_cli::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
