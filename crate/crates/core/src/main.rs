fn main() {
    std::process::exit(moeforge::cli::main_with_args(std::env::args_os()));
}
