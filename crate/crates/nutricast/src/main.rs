fn main() {
    std::process::exit(nutricast::cli::main_with(std::env::args_os()));
}
