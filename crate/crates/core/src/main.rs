fn main() {
    std::process::exit(gdanet::cli::main_with_args(std::env::args_os()));
}
