fn main() {
    std::process::exit(autoft::cli::main_with(std::env::args_os()));
}
