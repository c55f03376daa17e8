fn main() {
    std::process::exit(ghnq::cli::run(std::env::args_os()));
}
