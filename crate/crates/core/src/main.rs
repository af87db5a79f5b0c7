fn main() {
    std::process::exit(mfsr::cli::run(std::env::args_os()));
}
