fn main() {
    std::process::exit(apmc::cli::run(std::env::args_os()));
}
