fn main() {
    std::process::exit(engram_ar::cli::run(std::env::args_os()));
}
