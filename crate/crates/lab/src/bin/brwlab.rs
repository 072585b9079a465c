fn main() {
    std::process::exit(brwlab::cli::dispatch(std::env::args_os()));
}
