fn main() {
    std::process::exit(homfilter::cli::main_with(std::env::args_os()));
}
