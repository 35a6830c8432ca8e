fn main() {
    std::process::exit(fusevo_cli::run(std::env::args_os().collect()));
}
