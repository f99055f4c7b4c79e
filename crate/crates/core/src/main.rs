fn main() {
    std::process::exit(ci_engine::cli::main_with_args(std::env::args_os()));
}
