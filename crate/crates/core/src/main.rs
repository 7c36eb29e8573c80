fn main() {
    std::process::exit(frucast::cli::run(std::env::args_os()));
}
