fn main() {
    std::process::exit(noisebench_cli::run_from(std::env::args_os()));
}
