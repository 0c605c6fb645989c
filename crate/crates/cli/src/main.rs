fn main() {
    std::process::exit(emogate_cli::run(std::env::args_os()));
}
