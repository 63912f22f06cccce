fn main() {
    std::process::exit(gdial::cli::run(std::env::args_os().collect()));
}
