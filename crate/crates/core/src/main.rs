fn main() {
    std::process::exit(wlfm::cli::main_with_args(std::env::args_os()));
}
