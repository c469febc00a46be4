fn main() {
    std::process::exit(harecast_cli::run(std::env::args_os()));
}
