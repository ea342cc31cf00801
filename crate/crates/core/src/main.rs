fn main() {
    std::process::exit(rflow::cli::run(std::env::args_os()));
}
