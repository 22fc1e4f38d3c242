fn main() {
    std::process::exit(lumiq::cli::run(std::env::args_os()));
}
