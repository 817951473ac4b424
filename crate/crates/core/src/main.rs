fn main() {
    std::process::exit(tvproxy::cli::run_command(std::env::args_os()));
}
