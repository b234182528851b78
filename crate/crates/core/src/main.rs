fn main() {
    std::process::exit(polybubble::cli::run(std::env::args_os()));
}
