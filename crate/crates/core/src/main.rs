fn main() {
    std::process::exit(crystalmt::cli::dispatch(std::env::args_os()));
}
