fn main() {
    std::process::exit(gleak::cli::run(std::env::args_os()));
}
