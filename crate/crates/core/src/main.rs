fn main() {
    std::process::exit(unilabel::cli::execute(std::env::args_os()));
}
