fn main() {
    std::process::exit(rough_young_cli::main_with_args(std::env::args_os()));
}
