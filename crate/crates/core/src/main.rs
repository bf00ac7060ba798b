fn main() {
    std::process::exit(kflo::cli::run(std::env::args_os()));
}
