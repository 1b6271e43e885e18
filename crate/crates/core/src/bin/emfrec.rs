fn main() {
    std::process::exit(emfrec::cli::run(std::env::args_os()));
}
