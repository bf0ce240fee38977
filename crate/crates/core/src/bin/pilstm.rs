fn main() {
    std::process::exit(pilstm::cli::main_with_args(std::env::args_os()));
}
