fn main() {
    std::process::exit(gfncp::cli::main_with_args(std::env::args_os()));
}
