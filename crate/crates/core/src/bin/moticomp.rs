fn main() {
    std::process::exit(moticomp::cli::run(std::env::args_os()));
}
