fn main() {
    std::process::exit(changekit::cli::run(std::env::args_os()));
}
