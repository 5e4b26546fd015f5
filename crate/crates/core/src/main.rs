fn main() {
    std::process::exit(pubsel::cli::run(std::env::args_os()));
}
