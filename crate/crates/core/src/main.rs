fn main() {
    std::process::exit(litepose::cli::run(std::env::args_os()));
}
