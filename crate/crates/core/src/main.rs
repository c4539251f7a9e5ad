fn main() {
    std::process::exit(crossalign::cli::run(std::env::args_os()));
}
