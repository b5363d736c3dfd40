fn main() {
    std::process::exit(cmda_cli::run(std::env::args_os()));
}
