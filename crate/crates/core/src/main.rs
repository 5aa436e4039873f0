use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let code = proxmed::cli::main_with(proxmed::cli::Args::parse());
    std::process::exit(code);
}
