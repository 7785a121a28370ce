fn main() {
    std::process::exit(msqnet::cli::run(std::env::args_os()));
}
