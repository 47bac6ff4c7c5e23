fn main() {
    std::process::exit(ignet::cli::run(std::env::args_os()));
}
