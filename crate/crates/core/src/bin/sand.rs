fn main() {
    std::process::exit(sand_core::cli::main_with_args(std::env::args_os()));
}
