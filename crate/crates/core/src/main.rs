fn main() {
    std::process::exit(mixer::cli::run(std::env::args_os()));
}
