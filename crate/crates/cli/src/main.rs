fn main() {
    std::process::exit(graindeck_cli::run(std::env::args_os()));
}
