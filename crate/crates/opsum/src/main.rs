fn main() {
    std::process::exit(opsum::cli::run(std::env::args_os()));
}
