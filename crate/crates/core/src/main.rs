fn main() {
    std::process::exit(popsel::cli::run_command(std::env::args_os()));
}
