fn main() {
    std::process::exit(vseg::cli::run(std::env::args_os()));
}
