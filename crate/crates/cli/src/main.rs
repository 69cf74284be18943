fn main() {
    std::process::exit(histodiff_cli::run(std::env::args_os()));
}
