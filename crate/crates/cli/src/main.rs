fn main() {
    std::process::exit(octdistill_cli::main_with_args(std::env::args_os()));
}
