fn main() {
    std::process::exit(vtomo::cli::run(std::env::args_os()));
}
