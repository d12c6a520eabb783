fn main() {
    env_logger::Builder::new().filter_level(log::LevelFilter::Warn).init();
    std::process::exit(kgdiff::cli::run(std::env::args_os()));
}
