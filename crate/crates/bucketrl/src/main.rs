fn main() {
    std::process::exit(bucketrl::cli::run(std::env::args_os()));
}
