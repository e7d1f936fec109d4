fn main() {
    std::process::exit(binadapt::cli::run(std::env::args_os()));
}
