fn main() {
    std::process::exit(modgrok_cli::run_cli(std::env::args_os()));
}
