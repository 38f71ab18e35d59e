fn main() {
    std::process::exit(dropvar::cli::run(std::env::args_os()));
}
