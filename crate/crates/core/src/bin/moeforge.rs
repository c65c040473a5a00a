fn main() {
    std::process::exit(moeforge::cli::run(std::env::args_os()));
}
