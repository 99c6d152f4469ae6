fn main() {
    std::process::exit(tek_cli::run(std::env::args_os()));
}
