fn main() {
    std::process::exit(feast::cli::run(std::env::args_os()));
}
