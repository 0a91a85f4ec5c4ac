fn main() {
    std::process::exit(sgxp_cli::main_with_args(std::env::args_os()));
}
