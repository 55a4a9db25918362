fn main() {
    std::process::exit(eegflow::cli::main_with_args(std::env::args_os()));
}
