fn main() {
    std::process::exit(corrmatch::cli::run(std::env::args_os()));
}
