fn main() {
    std::process::exit(arpg::cli::run(std::env::args_os()));
}
