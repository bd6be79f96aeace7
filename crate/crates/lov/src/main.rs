fn main() {
    std::process::exit(lov::cli::run(std::env::args_os()));
}
