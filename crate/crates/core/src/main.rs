fn main() {
    std::process::exit(leafscope::cli::run(std::env::args_os()));
}
