fn main() {
    std::process::exit(restormixer::cli::run(std::env::args_os()));
}
