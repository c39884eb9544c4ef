fn main() {
    std::process::exit(mbdepth::cli::run(std::env::args_os()));
}
