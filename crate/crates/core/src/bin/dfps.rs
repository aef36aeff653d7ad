//! `dfps` command-line tool; see `dfps --help`.

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DFPS_LOG", "info")).init();
    std::process::exit(dfps::cli::run(std::env::args_os()));
}
