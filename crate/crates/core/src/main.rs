fn main() {
    std::process::exit(moex::cli::main_with_args(std::env::args_os()));
}
