fn main() {
    std::process::exit(soupforge::cli::run(std::env::args_os()));
}
