fn main() {
    std::process::exit(apkam::cli::main_with_args(std::env::args().collect()));
}
