fn main() {
    std::process::exit(groundpose::cli::run(std::env::args_os()));
}
