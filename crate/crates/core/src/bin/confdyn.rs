fn main() {
    std::process::exit(confdyn::cli::run(std::env::args_os()));
}
